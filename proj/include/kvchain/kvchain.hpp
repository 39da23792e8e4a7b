// Copyright (C) 2026 The kvchain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "kvchain/common.hpp"
#include "kvchain/tensor.hpp"
#include "kvchain/graph.hpp"
#include "kvchain/rope.hpp"
#include "kvchain/layout.hpp"
#include "kvchain/model.hpp"
#include "kvchain/prompt.hpp"
#include "kvchain/serialize.hpp"
#include "kvchain/sequence.hpp"
#include "kvchain/tasks.hpp"
#include "kvchain/optim.hpp"
#include "kvchain/trainer.hpp"
#include "kvchain/chain.hpp"
#include "kvchain/bench.hpp"
#include "kvchain/verify.hpp"
