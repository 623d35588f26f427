#pragma once

#include "corma/adapter.hpp"
#include "corma/common.hpp"
#include "corma/datakit.hpp"
#include "corma/evallab.hpp"
#include "corma/numkit.hpp"
#include "corma/regimekit.hpp"
#include "corma/synthcontact.hpp"
#include "corma/trainlab.hpp"
