#pragma once

// Everything at once.

#include "tdrobust/attack/model_space.hpp"
#include "tdrobust/bench/experiment.hpp"
#include "tdrobust/bench/fixtures.hpp"
#include "tdrobust/data/corrupt.hpp"
#include "tdrobust/data/dataset_config.hpp"
#include "tdrobust/defense/defense.hpp"
#include "tdrobust/diffcore/checkpoint.hpp"
#include "tdrobust/diffcore/graph.hpp"
#include "tdrobust/game/game.hpp"
