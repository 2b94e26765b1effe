/*
 * Copyright 2026 swarmseg contributors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// Umbrella header: the whole library.

#include "swarmseg/common.hpp"
#include "swarmseg/config.hpp"
#include "swarmseg/datasetio.hpp"
#include "swarmseg/eval.hpp"
#include "swarmseg/losses.hpp"
#include "swarmseg/metrics.hpp"
#include "swarmseg/morphology.hpp"
#include "swarmseg/nets.hpp"
#include "swarmseg/params.hpp"
#include "swarmseg/rng.hpp"
#include "swarmseg/selfcheck.hpp"
#include "swarmseg/serialize.hpp"
#include "swarmseg/svg.hpp"
#include "swarmseg/swarm.hpp"
#include "swarmseg/synthdata.hpp"
#include "swarmseg/tensor.hpp"
