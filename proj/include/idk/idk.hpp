#pragma once

// Umbrella header for the whole library.

#include "idk/error.hpp"
#include "idk/objective.hpp"
#include "idk/autodiff.hpp"
#include "idk/model.hpp"
#include "idk/optim.hpp"
#include "idk/io.hpp"
#include "idk/dataset.hpp"
#include "idk/checkpoint.hpp"
#include "idk/trainer.hpp"
#include "idk/eval.hpp"
#include "idk/experiment.hpp"
