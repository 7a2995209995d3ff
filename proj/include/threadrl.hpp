#pragma once

#include "threadrl/episode_env.hpp"
#include "threadrl/error.hpp"
#include "threadrl/gradcheck.hpp"
#include "threadrl/harness.hpp"
#include "threadrl/q_models.hpp"
#include "threadrl/rng.hpp"
#include "threadrl/synth.hpp"
#include "threadrl/text_featurizer.hpp"
#include "threadrl/trainer.hpp"
#include "threadrl/tree_corpus.hpp"
