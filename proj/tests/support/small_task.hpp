#pragma once

// A small synthetic rich/poor task and matching specs for fast training tests.

#include "rdpd/experiment.hpp"

namespace rdpd::oracle {

inline SynthConfig small_synth(std::uint64_t seed = 3) {
  SynthConfig c;
  c.n_subjects = 6;
  c.windows_per_subject = 40;
  c.segment_len = 8;
  c.n_segments = 3;
  c.seed = seed;
  return c;
}

inline ExperimentData small_data(const SynthConfig& c = small_synth()) {
  return prepare_data(synth_generate(c), SplitSpec::ratio(1, 4.0 / 6, 1.0 / 6, 1.0 / 6), "poor");
}

inline RunConfig small_config(const ExperimentData& d, std::size_t epochs = 4) {
  RunConfig cfg;
  cfg.teacher_spec = default_teacher_spec(d.rich.train);
  cfg.teacher_spec.n_filters = 6;
  cfg.teacher_spec.filter_width = 3;
  cfg.teacher_spec.n_hidden = 6;
  cfg.student_spec = derive_student_spec(cfg.teacher_spec, d.poor.train.n_channels());
  cfg.max_iterations = epochs;
  cfg.batch_size = 32;
  cfg.temperature = 2.5;
  return cfg;
}

}  // namespace rdpd::oracle
