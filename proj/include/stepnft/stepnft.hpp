#pragma once

#include "stepnft/errors.hpp"
#include "stepnft/rng.hpp"
#include "stepnft/policy_net.hpp"
#include "stepnft/flow_solver.hpp"
#include "stepnft/objective.hpp"
#include "stepnft/environment.hpp"
#include "stepnft/rollout.hpp"
#include "stepnft/config.hpp"
#include "stepnft/trainer.hpp"
#include "stepnft/verify.hpp"
#include "stepnft/ablation.hpp"
