#pragma once

#include "uipx/closed_form.hpp"
#include "uipx/contracts.hpp"
#include "uipx/errors.hpp"
#include "uipx/experiment.hpp"
#include "uipx/grid.hpp"
#include "uipx/hjb_solver.hpp"
#include "uipx/linalg.hpp"
#include "uipx/market_models.hpp"
#include "uipx/strategies.hpp"
#include "uipx/surface_io.hpp"
#include "uipx/verification.hpp"
