#pragma once

#include <vector>

#include "occmem/eval/metrics.hpp"
#include "occmem/video/video_detector.hpp"

namespace occmem::eval {

struct EvalOptions {
  double iou_threshold = 0.5;
  double score_threshold = 0.5;
};

template <typename T>
EvalReport evaluate(const std::vector<const synth::SequenceSample*>& seqs,
                    const nn::ParamStore<T>& params, const video::VideoConfig& cfg,
                    EvalOptions opt = {}) {
  std::vector<BoxSet> all_dets, all_gts;
  std::vector<synth::FrameAnnotation> all_anns;
  EvalReport r;
  r.iou_threshold = opt.iou_threshold;
  r.score_threshold = opt.score_threshold;
  for (const auto* s : seqs) {
    auto out = video::video_forward(s->frames, params, cfg);
    std::vector<nn::Tensor<T>> trace;
    for (auto& m : out.memory) trace.push_back(std::move(m.M));
    for (std::size_t t = 0; t < s->frames.size(); ++t) {
      all_dets.push_back(out.detections[t]);
      all_gts.push_back(synth::gt_boxes(s->annotations[t].objects));
      all_anns.push_back(s->annotations[t]);
    }
    for (auto [obj, onset] : occlusion_onsets(s->annotations)) {
      std::vector<Box> boxes;
      for (const auto& fa : s->annotations) boxes.push_back(fa.objects[obj].box);
      r.persistence.push_back(memory_persistence(trace, boxes, onset, cfg.detector.stride));
      r.persistence_onsets.push_back(onset);
    }
  }
  MapResult m = mean_average_precision(all_dets, all_gts, cfg.detector.num_classes,
                                       opt.iou_threshold);
  r.per_class_ap = m.per_class;
  r.map = m.map;
  r.warnings = m.warnings;
  RecallSplit rec = occlusion_recall(all_dets, all_anns, opt.iou_threshold, opt.score_threshold);
  r.occluded_recall = rec.occluded;
  r.visible_recall = rec.visible;
  return r;
}

}  // namespace occmem::eval
