#pragma once

#include "corma/numkit/ops.hpp"
#include "corma/numkit/optim.hpp"
#include "corma/numkit/params_io.hpp"
#include "corma/numkit/tensor.hpp"
