#pragma once

// Entry points a custom-model shared library exports for the CLI. The
// library owns the system it returns and must free it in its destroy hook.
//
//   extern "C" cutpost::TwoModuleSystem* cutpost_plugin_create(const char* config_json);
//   extern "C" void cutpost_plugin_destroy(cutpost::TwoModuleSystem*);
//
// create may throw cutpost::ConfigError; both sides must be built with the
// same compiler and standard library.

#include "cutpost/core.hpp"

namespace cutpost {

using PluginCreateFn = TwoModuleSystem* (*)(const char*);
using PluginDestroyFn = void (*)(TwoModuleSystem*);

inline constexpr const char* kPluginCreateSymbol = "cutpost_plugin_create";
inline constexpr const char* kPluginDestroySymbol = "cutpost_plugin_destroy";

}  // namespace cutpost
