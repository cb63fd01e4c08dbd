#pragma once

#include "ou3d/common.hpp"
#include "ou3d/binio.hpp"
#include "ou3d/scene.hpp"
#include "ou3d/ply.hpp"
#include "ou3d/viewgen.hpp"
#include "ou3d/render.hpp"
#include "ou3d/view_io.hpp"
#include "ou3d/vlmio.hpp"
#include "ou3d/liftfuse.hpp"
#include "ou3d/distill.hpp"
#include "ou3d/query.hpp"
#include "ou3d/metrics.hpp"
#include "ou3d/pipeline.hpp"
#include "ou3d/sweep.hpp"
#include "ou3d/stages.hpp"
