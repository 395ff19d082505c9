#pragma once

#include "vtgrasp/error.hpp"
#include "vtgrasp/rng.hpp"
#include "vtgrasp/tensor.hpp"
#include "vtgrasp/ops.hpp"
#include "vtgrasp/gradcheck.hpp"
#include "vtgrasp/layers.hpp"
#include "vtgrasp/attention.hpp"
#include "vtgrasp/touch_net.hpp"
#include "vtgrasp/slip_net.hpp"
#include "vtgrasp/tactile_sim.hpp"
#include "vtgrasp/dataset.hpp"
#include "vtgrasp/grasp_ctl.hpp"
#include "vtgrasp/train.hpp"
