#pragma once

#include "rmsin/tensor/tensor.hpp"
#include "rmsin/tensor/ops.hpp"
#include "rmsin/tensor/spatial.hpp"
#include "rmsin/nn/layers.hpp"
#include "rmsin/nn/attention.hpp"
#include "rmsin/arc.hpp"
#include "rmsin/iim.hpp"
#include "rmsin/cim.hpp"
#include "rmsin/model.hpp"
#include "rmsin/metrics.hpp"
#include "rmsin/data.hpp"
#include "rmsin/gradcheck.hpp"
#include "rmsin/gradsuite.hpp"
#include "rmsin/harness/optim.hpp"
#include "rmsin/harness/config.hpp"
#include "rmsin/harness/checkpoint.hpp"
#include "rmsin/harness/train.hpp"
#include "rmsin/harness/ablate.hpp"
