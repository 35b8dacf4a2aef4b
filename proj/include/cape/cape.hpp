// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "cape/autodiff.hpp"
#include "cape/checkpoint.hpp"
#include "cape/config.hpp"
#include "cape/data.hpp"
#include "cape/epi_sim.hpp"
#include "cape/error.hpp"
#include "cape/eval.hpp"
#include "cape/grad_check.hpp"
#include "cape/gradcheck_suite.hpp"
#include "cape/linalg.hpp"
#include "cape/losses.hpp"
#include "cape/model.hpp"
#include "cape/optim.hpp"
#include "cape/random.hpp"
#include "cape/tensor.hpp"
#include "cape/training.hpp"
