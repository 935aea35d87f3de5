#pragma once

#include "greybox/apparatus.hpp"
#include "greybox/assembly.hpp"
#include "greybox/diagnostics.hpp"
#include "greybox/error.hpp"
#include "greybox/lti.hpp"
#include "greybox/network.hpp"
#include "greybox/parallel.hpp"
#include "greybox/participation.hpp"
#include "greybox/report.hpp"
#include "greybox/spectrum.hpp"
#include "greybox/system.hpp"
#include "greybox/vecfit.hpp"
