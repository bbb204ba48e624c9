#pragma once

// Umbrella header.

#include "flowcast/analysis.hpp"
#include "flowcast/bench.hpp"
#include "flowcast/core.hpp"
#include "flowcast/field_io.hpp"
#include "flowcast/fields.hpp"
#include "flowcast/integrator.hpp"
#include "flowcast/rng.hpp"
