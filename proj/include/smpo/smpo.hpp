#pragma once

#include "smpo/autodiff.hpp"
#include "smpo/checkpoint.hpp"
#include "smpo/checks.hpp"
#include "smpo/dataset_io.hpp"
#include "smpo/denoiser.hpp"
#include "smpo/diffusion.hpp"
#include "smpo/errors.hpp"
#include "smpo/evaluate.hpp"
#include "smpo/numerics.hpp"
#include "smpo/objectives.hpp"
#include "smpo/optim.hpp"
#include "smpo/preference.hpp"
#include "smpo/toy_data.hpp"
#include "smpo/training.hpp"
