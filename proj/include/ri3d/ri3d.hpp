#pragma once

#include "ri3d/camera.hpp"
#include "ri3d/camera_path.hpp"
#include "ri3d/cg.hpp"
#include "ri3d/checkpoint.hpp"
#include "ri3d/codec.hpp"
#include "ri3d/config.hpp"
#include "ri3d/dataset.hpp"
#include "ri3d/depth_fusion.hpp"
#include "ri3d/error.hpp"
#include "ri3d/gaussian_cloud.hpp"
#include "ri3d/harmonic.hpp"
#include "ri3d/image.hpp"
#include "ri3d/io.hpp"
#include "ri3d/losses.hpp"
#include "ri3d/optimizer.hpp"
#include "ri3d/oracle.hpp"
#include "ri3d/oracle_http.hpp"
#include "ri3d/renderer.hpp"
#include "ri3d/synthetic.hpp"
