#pragma once

// Umbrella header: the whole library in dependency order.

#include "regent/error.hpp"
#include "regent/rng.hpp"
#include "regent/io.hpp"
#include "regent/threads.hpp"
#include "regent/core.hpp"
#include "regent/serialize.hpp"
#include "regent/distance.hpp"
#include "regent/retrieval.hpp"
#include "regent/agents.hpp"
#include "regent/envs.hpp"
#include "regent/seqmodel.hpp"
#include "regent/policies.hpp"
#include "regent/theory.hpp"
#include "regent/config.hpp"
#include "regent/pipeline.hpp"
