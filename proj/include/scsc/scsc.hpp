#pragma once

#include "scsc/tensor.hpp"
#include "scsc/ops.hpp"
#include "scsc/autodiff.hpp"
#include "scsc/gradcheck.hpp"
#include "scsc/scsc_block.hpp"
#include "scsc/serialize.hpp"
#include "scsc/arch.hpp"
#include "scsc/network.hpp"
#include "scsc/complexity.hpp"
#include "scsc/train.hpp"
