// Copyright 2026 The DeSA Simulator Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "desa/checkpoint.hpp"
#include "desa/datasets.hpp"
#include "desa/distill.hpp"
#include "desa/errors.hpp"
#include "desa/eval.hpp"
#include "desa/losses.hpp"
#include "desa/models.hpp"
#include "desa/parallel.hpp"
#include "desa/protocol.hpp"
#include "desa/rng.hpp"
#include "desa/tensor.hpp"
