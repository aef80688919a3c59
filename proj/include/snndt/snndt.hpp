#pragma once

#include "snndt/attention.hpp"
#include "snndt/config.hpp"
#include "snndt/dataset.hpp"
#include "snndt/envs.hpp"
#include "snndt/harness.hpp"
#include "snndt/model.hpp"
#include "snndt/params.hpp"
#include "snndt/plasticity.hpp"
#include "snndt/positional.hpp"
#include "snndt/snn.hpp"
#include "snndt/tape.hpp"
#include "snndt/tensor.hpp"
