// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "speechface/audio.hpp"
#include "speechface/autograd.hpp"
#include "speechface/checkpoint.hpp"
#include "speechface/corpus.hpp"
#include "speechface/face3d.hpp"
#include "speechface/net.hpp"
#include "speechface/ops.hpp"
#include "speechface/param_csv.hpp"
#include "speechface/streaming.hpp"
#include "speechface/tensor.hpp"
#include "speechface/trainer.hpp"
