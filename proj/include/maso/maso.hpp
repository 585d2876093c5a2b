#pragma once

#include "maso/buffers.hpp"
#include "maso/common.hpp"
#include "maso/config.hpp"
#include "maso/controller.hpp"
#include "maso/envs.hpp"
#include "maso/formats.hpp"
#include "maso/policy.hpp"
#include "maso/rewards.hpp"
#include "maso/rng.hpp"
#include "maso/run.hpp"
#include "maso/trainer.hpp"
#include "maso/trajectory.hpp"
#include "maso/vocab.hpp"
#include "maso/workflow.hpp"
