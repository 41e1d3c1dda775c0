#pragma once

// Convenience umbrella for the whole toolkit.

#include <emitterlab/correlator.hpp>
#include <emitterlab/errors.hpp>
#include <emitterlab/inference.hpp>
#include <emitterlab/levmar.hpp>
#include <emitterlab/mcsim.hpp>
#include <emitterlab/model.hpp>
#include <emitterlab/ode.hpp>
#include <emitterlab/pipeline.hpp>
#include <emitterlab/rng.hpp>
#include <emitterlab/timetags.hpp>
#include <emitterlab/units.hpp>
