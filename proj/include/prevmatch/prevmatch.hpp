#pragma once

#include "prevmatch/config.hpp"
#include "prevmatch/data.hpp"
#include "prevmatch/io.hpp"
#include "prevmatch/metrics.hpp"
#include "prevmatch/nn.hpp"
#include "prevmatch/registry.hpp"
#include "prevmatch/rng.hpp"
#include "prevmatch/run.hpp"
#include "prevmatch/tensor.hpp"
#include "prevmatch/trainer.hpp"
