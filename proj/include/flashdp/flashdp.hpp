#pragma once

#include "flashdp/errors.hpp"
#include "flashdp/tensor.hpp"
#include "flashdp/memmodel.hpp"
#include "flashdp/tiling.hpp"
#include "flashdp/dpcore.hpp"
#include "flashdp/workflows.hpp"
#include "flashdp/oracle.hpp"
#include "flashdp/bench.hpp"
