#pragma once

#include "nucprop/grid.hpp"
#include "nucprop/random.hpp"
#include "nucprop/core.hpp"
#include "nucprop/motion.hpp"
#include "nucprop/hungarian.hpp"
#include "nucprop/tracker.hpp"
#include "nucprop/parallel.hpp"
#include "nucprop/propagate.hpp"
#include "nucprop/uncertainty_loss.hpp"
#include "nucprop/sim.hpp"
#include "nucprop/metrics.hpp"
#include "nucprop/io.hpp"
