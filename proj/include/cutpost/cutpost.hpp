#pragma once

#include "cutpost/calibration.hpp"
#include "cutpost/core.hpp"
#include "cutpost/diagnostics.hpp"
#include "cutpost/error.hpp"
#include "cutpost/io/csv.hpp"
#include "cutpost/io/serialize.hpp"
#include "cutpost/laplace.hpp"
#include "cutpost/models/hpv.hpp"
#include "cutpost/models/random_effects.hpp"
#include "cutpost/optimize.hpp"
#include "cutpost/parallel.hpp"
#include "cutpost/plugin.hpp"
#include "cutpost/random.hpp"
#include "cutpost/samplers.hpp"
#include "cutpost/semimodular.hpp"
#include "cutpost/types.hpp"
