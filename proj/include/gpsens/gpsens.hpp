// Umbrella header: pulls in the full library.
//
// Individual components can be included on their own; every header under
// gpsens/ is self-contained. This is the convenient spelling for callers
// that use the pipeline end to end.
#pragma once

#include <gpsens/bench.hpp>
#include <gpsens/csv.hpp>
#include <gpsens/errors.hpp>
#include <gpsens/estimators.hpp>
#include <gpsens/gp.hpp>
#include <gpsens/gp_io.hpp>
#include <gpsens/kernels.hpp>
#include <gpsens/optim.hpp>
#include <gpsens/parallel.hpp>
#include <gpsens/pipeline.hpp>
#include <gpsens/rng.hpp>
#include <gpsens/runner.hpp>
#include <gpsens/sobol_sequence.hpp>
#include <gpsens/space.hpp>
#include <gpsens/uncertainty.hpp>
