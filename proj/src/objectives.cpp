#include "sfmamba/objectives.hpp"

#include <cmath>

#include "json.hpp"

namespace sfm::objectives {

namespace {

void require_logits(Var logits, const char* what) {
  if (logits.shape().size() != 2) throw ShapeError(std::string(what) + ": logits must be [B, C], got " + shape_str(logits.shape()));
}

std::vector<std::size_t> selected_rows(const std::vector<bool>& selected, std::size_t batch, const char* what) {
  if (selected.size() != batch) throw ShapeError(std::string(what) + ": mask length " + std::to_string(selected.size()) + " vs batch " + std::to_string(batch));
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < batch; ++i)
    if (selected[i]) rows.push_back(i);
  return rows;
}

Tensor one_hot(const std::vector<std::size_t>& labels, std::size_t classes, double on, double off, const char* what) {
  std::vector<double> y(labels.size() * classes, off);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw DomainError(std::string(what) + ": label " + std::to_string(labels[i]) + " out of range for " + std::to_string(classes) + " classes");
    y[i * classes + labels[i]] = on;
  }
  return Tensor({labels.size(), classes}, std::move(y));
}

}  // namespace

Var label_smoothed_ce(Var logits, const std::vector<std::size_t>& labels, double alpha) {
  require_logits(logits, "label_smoothed_ce");
  if (!(alpha >= 0.0 && alpha < 1.0)) throw DomainError("label_smoothed_ce: alpha must lie in [0, 1)");
  const std::size_t b = logits.shape()[0], c = logits.shape()[1];
  if (labels.size() != b) throw ShapeError("label_smoothed_ce: label count does not match batch");
  const double off = alpha / static_cast<double>(c);
  Var target = logits.tape()->constant(one_hot(labels, c, 1.0 - alpha + off, off, "label_smoothed_ce"));
  return ad::scale(ad::sum_all(ad::mul(ad::log_softmax(logits), target)), -1.0 / static_cast<double>(b));
}

Var entropy_loss(Var logits) {
  require_logits(logits, "entropy_loss");
  Var lp = ad::log_softmax(logits);
  const double b = static_cast<double>(logits.shape()[0]);
  return ad::scale(ad::sum_all(ad::mul(ad::exp(lp), lp)), -1.0 / b);
}

Var diversity_loss(Var logits) {
  require_logits(logits, "diversity_loss");
  const double b = static_cast<double>(logits.shape()[0]);
  // log pbar_c = logsumexp_b log p_bc - log B
  Var log_mean = ad::add_scalar(ad::logsumexp(ad::transpose(ad::log_softmax(logits))), -std::log(b));
  return ad::sum_all(ad::mul(ad::exp(log_mean), log_mean));
}

Var pseudo_ce(Var logits, const std::vector<std::size_t>& labels, const std::vector<bool>& selected) {
  require_logits(logits, "pseudo_ce");
  const std::size_t b = logits.shape()[0], c = logits.shape()[1];
  if (labels.size() != b) throw ShapeError("pseudo_ce: label count does not match batch");
  const auto rows = selected_rows(selected, b, "pseudo_ce");
  if (rows.empty()) return logits.tape()->constant(Tensor::scalar(0.0));
  std::vector<std::size_t> picked;
  for (auto r : rows) picked.push_back(labels[r]);
  Var target = logits.tape()->constant(one_hot(picked, c, 1.0, 0.0, "pseudo_ce"));
  Var lp = ad::log_softmax(ad::gather(logits, 0, rows));
  return ad::scale(ad::sum_all(ad::mul(lp, target)), -1.0 / static_cast<double>(rows.size()));
}

Var kl_consistency(Var logits_orig, Var logits_pert, const std::vector<bool>& selected) {
  require_logits(logits_orig, "kl_consistency");
  if (logits_orig.shape() != logits_pert.shape()) throw ShapeError("kl_consistency", logits_orig.shape(), logits_pert.shape());
  const auto rows = selected_rows(selected, logits_orig.shape()[0], "kl_consistency");
  if (rows.empty()) return logits_orig.tape()->constant(Tensor::scalar(0.0));
  Var lp = ad::log_softmax(ad::gather(logits_orig, 0, rows));
  Var lq = ad::log_softmax(ad::gather(logits_pert, 0, rows));
  return ad::scale(ad::sum_all(ad::mul(ad::exp(lp), ad::sub(lp, lq))), 1.0 / static_cast<double>(rows.size()));
}

Var total_target_loss(Var ent, Var div, Var ce, Var kl) { return ad::add(ad::add(ad::add(ent, div), ce), kl); }

std::string LossBreakdown::json_line(std::size_t step) const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["lce"] = lce ? nlohmann::ordered_json(*lce) : nlohmann::ordered_json(nullptr);
  if (lce) {
    for (const char* k : {"ent", "div", "ce", "kl"}) j[k] = nullptr;
    j["total"] = *lce;
  } else {
    j["ent"] = ent;
    j["div"] = div;
    j["ce"] = ce;
    j["kl"] = kl;
    j["total"] = total;
  }
  j["n_selected"] = n_selected;
  j["batch_size"] = batch_size;
  return j.dump();
}

}  // namespace sfm::objectives
