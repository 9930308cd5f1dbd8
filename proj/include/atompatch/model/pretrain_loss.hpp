#pragma once

// Masked pretraining objective for the structure encoder: recover the element
// class of hidden atoms, the length of edges touching them, and the noise
// injected into the corresponding unit directions. Each term is a mean over
// its own support, so the weights keep their meaning across graph sizes:
//
//   L = L_type + lambda_dist * L_dist + lambda_dir * L_dir

#include <cstddef>
#include <vector>

#include "atompatch/chem/atom_graph.hpp"
#include "atompatch/core/diff_array.hpp"
#include "atompatch/core/errors.hpp"
#include "atompatch/core/nn_ops.hpp"
#include "atompatch/core/ops.hpp"
#include "atompatch/model/encoder.hpp"
#include "atompatch/model/masking.hpp"

namespace atompatch {

struct PretrainLosses {
  DiffArray type_loss;
  DiffArray dist_loss;
  DiffArray dir_loss;
  DiffArray total;
  std::size_t masked_atom_count = 0;
  std::size_t masked_edge_count = 0;
};

inline PretrainLosses pretrain_losses(const Egnn& enc, const EncoderHeads& heads,
                                      const BatchedGraph& b, const MaskedBatch& mb,
                                      Rng* train_rng = nullptr) {
  if (mb.masked_atoms.empty()) throw Error("no masked atoms");
  DiffArray coords = b.coord_matrix(false);
  EncoderOutput out = enc.forward(b, mb.element_classes, coords, train_rng);

  PretrainLosses res;
  res.masked_atom_count = mb.masked_atoms.size();
  res.masked_edge_count = mb.masked_edges.size();

  DiffArray xm = gather_rows(out.node_features, mb.masked_atoms);
  DiffArray logp = log_softmax(heads.elem_head.forward(xm, train_rng));
  DiffArray picked = pick_per_row(logp, mb.type_targets);
  res.type_loss = scale(sum_all(picked), -1.0 / static_cast<double>(mb.masked_atoms.size()));

  if (!mb.masked_edges.empty()) {
    const std::size_t ne = mb.masked_edges.size();
    std::vector<std::size_t> ei(ne), ej(ne);
    std::vector<double> tgt(ne), noised(ne * 3), eps(ne * 3);
    for (std::size_t e = 0; e < ne; ++e) {
      ei[e] = mb.masked_edges[e].first;
      ej[e] = mb.masked_edges[e].second;
      tgt[e] = mb.dist_targets[e];
      for (std::size_t c = 0; c < 3; ++c) {
        noised[e * 3 + c] = mb.noised_dirs[e][c];
        eps[e * 3 + c] = mb.dir_noise[e][c];
      }
    }
    DiffArray hi = gather_rows(out.node_features, ei);
    DiffArray hj = gather_rows(out.node_features, ej);

    DiffArray pred_d = reshape(heads.dist_head.forward(hconcat(hi, hj), train_rng), Shape{ne});
    DiffArray target_d(Shape{ne}, std::move(tgt), false);
    res.dist_loss =
        scale(sum_all(abs_(sub(pred_d, target_d))), 1.0 / static_cast<double>(ne));

    DiffArray dir_in(Shape{ne, 3}, std::move(noised), false);
    DiffArray pred_eps = heads.dir_head.forward(hconcat3(hi, hj, dir_in), train_rng);
    DiffArray target_eps(Shape{ne, 3}, std::move(eps), false);
    DiffArray diff = sub(pred_eps, target_eps);
    res.dir_loss = scale(sum_all(mul(diff, diff)), 1.0 / static_cast<double>(ne));
  } else {
    res.dist_loss = DiffArray::scalar(0.0);
    res.dir_loss = DiffArray::scalar(0.0);
  }

  res.total = add(res.type_loss,
                  add(scale(res.dist_loss, enc.cfg.lambda_dist),
                      scale(res.dir_loss, enc.cfg.lambda_dir)));
  check_finite(res.total, "pretraining loss");
  return res;
}

struct PretrainEval {
  double accuracy = 0.0;  // argmax element recovery over masked atoms
  double dist_mae = 0.0;  // mean absolute error over masked edges
};

/// Evaluation forward pass; call outside any tape.
inline PretrainEval pretrain_eval(const Egnn& enc, const EncoderHeads& heads,
                                  const BatchedGraph& b, const MaskedBatch& mb) {
  if (mb.masked_atoms.empty()) throw Error("no masked atoms");
  EncoderOutput out = enc.forward(b, mb.element_classes, b.coord_matrix(false));
  DiffArray xm = gather_rows(out.node_features, mb.masked_atoms);
  DiffArray logits = heads.elem_head.forward(xm);

  PretrainEval ev;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < mb.masked_atoms.size(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c) {
      if (logits.at(r, c) > logits.at(r, best)) best = c;
    }
    if (best == mb.type_targets[r]) ++hits;
  }
  ev.accuracy = static_cast<double>(hits) / static_cast<double>(mb.masked_atoms.size());

  if (!mb.masked_edges.empty()) {
    const std::size_t ne = mb.masked_edges.size();
    std::vector<std::size_t> ei(ne), ej(ne);
    for (std::size_t e = 0; e < ne; ++e) {
      ei[e] = mb.masked_edges[e].first;
      ej[e] = mb.masked_edges[e].second;
    }
    DiffArray pair = hconcat(gather_rows(out.node_features, ei),
                             gather_rows(out.node_features, ej));
    DiffArray pred = heads.dist_head.forward(pair);
    double mae = 0.0;
    for (std::size_t e = 0; e < ne; ++e) mae += std::abs(pred.at(e, 0) - mb.dist_targets[e]);
    ev.dist_mae = mae / static_cast<double>(ne);
  }
  return ev;
}

}  // namespace atompatch
