#include <doctest.h>

#include <cmath>
#include <vector>

#include "support.hpp"
#include "whisq/gradcheck.hpp"
#include "whisq/losses.hpp"
#include "whisq/model.hpp"
#include "whisq/trainer.hpp"

using namespace whisq;
using whisq::testing::random_tensor;

namespace {

struct Composed {
  LossBreakdown values;
  std::vector<Tensor> audio, text;
  std::vector<double> y_omq, y_ta;
};

Composed run_total(const Batch& batch, const ModelParams& p, const WhisqConfig& cfg) {
  ad::Tape t;
  const ParamBinding b(t, p, false);
  const auto f = forward_graph(b, batch, cfg);
  const auto l = total_loss(f.y_omq, f.y_ta, batch, f.audio, f.text, cfg);
  Composed c;
  c.values = l.values();
  for (const auto& v : f.audio) c.audio.push_back(v.value());
  for (const auto& v : f.text) c.text.push_back(v.value());
  c.y_omq = f.y_omq.value().storage();
  c.y_ta = f.y_ta.value().storage();
  return c;
}

Tensor valid_rows(const Tensor& t, std::span<const unsigned char> mask) {
  std::size_t n = 0;
  for (auto m : mask) n += m;
  Tensor out({n, t.cols()});
  std::size_t r = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    for (std::size_t c = 0; c < t.cols(); ++c) out.at(r, c) = t.at(i, c);
    ++r;
  }
  return out;
}

}  // namespace

TEST_CASE("Huber worked examples") {
  const std::vector<double> a = {1.0, 2.0, -3.0};
  CHECK(huber(a, a, 1.0) == 0.0);
  CHECK(huber(std::vector<double>{2.5}, std::vector<double>{2.0}, 1.0) == 0.125);
  CHECK(huber(std::vector<double>{4.0}, std::vector<double>{2.0}, 1.0) == 1.5);
  CHECK(huber(std::vector<double>{2.5, 4.0}, std::vector<double>{2.0, 2.0}, 1.0) == doctest::Approx(0.8125));
  CHECK(huber(std::vector<double>{0.0}, std::vector<double>{1.0}, 1.0) == 0.5);  // boundary, both branches agree
}

TEST_CASE("Huber errors") {
  const std::vector<double> none;
  CHECK_THROWS_AS(huber(none, none, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(huber(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(huber(std::vector<double>{1.0}, std::vector<double>{1.0}, 0.0), std::invalid_argument);
}

TEST_CASE("total loss equals the hand composition of its parts") {
  const WhisqConfig cfg = toy_gradcheck_config();
  const Batch batch = toy_batch(cfg, 3);
  const ModelParams p = init_params(cfg, 3);
  const auto c = run_total(batch, p, cfg);

  const double h_omq = huber(c.y_omq, batch.omq_targets, cfg.huber_delta);
  const double h_ta = huber(c.y_ta, batch.ta_targets, cfg.huber_delta);
  CHECK(c.values.huber_omq == h_omq);
  CHECK(c.values.huber_ta == h_ta);
  CHECK(c.values.task == 0.5 * (h_omq + h_ta));

  const auto opts = sinkhorn_options(cfg);
  double ot_sum = 0.0;
  for (std::size_t i = 0; i < batch.size; ++i) {
    ot_sum += ot::sinkhorn_divergence(valid_rows(c.audio[i], batch.audio_mask_row(i)),
                                      valid_rows(c.text[i], batch.text_mask_row(i)), opts)
                  .value;
  }
  CHECK(c.values.ot == doctest::Approx(ot_sum / 2.0).epsilon(1e-14));
  CHECK(c.values.total == c.values.task + cfg.ot_weight * c.values.ot);
}

TEST_CASE("lambda enters linearly and lambda = 0 leaves the task loss") {
  WhisqConfig cfg = toy_gradcheck_config();
  const Batch batch = toy_batch(cfg, 4);
  const ModelParams p = init_params(cfg, 4);
  cfg.ot_weight = 0.0;
  const auto off = run_total(batch, p, cfg).values;
  CHECK(off.total == off.task);
  CHECK(off.ot > 0.0);
  cfg.ot_weight = 4.057e-5;
  const auto on = run_total(batch, p, cfg).values;
  CHECK(on.task == off.task);
  CHECK(on.ot == off.ot);
  CHECK(on.total - off.total == doctest::Approx(4.057e-5 * on.ot).epsilon(1e-9));
}

TEST_CASE("perfect predictions with lambda = 0 give zero total") {
  WhisqConfig cfg = toy_gradcheck_config();
  cfg.ot_weight = 0.0;
  Batch batch = toy_batch(cfg, 5);
  const ModelParams p = init_params(cfg, 5);
  const auto pred = forward(batch, p, cfg);
  batch.omq_targets = pred.y_omq;
  batch.ta_targets = pred.y_ta;
  CHECK(run_total(batch, p, cfg).values.total == 0.0);
}

TEST_CASE("batch OT loss is the mean of item divergences and is symmetric") {
  Rng rng(6);
  ad::Tape t;
  Batch batch;
  batch.size = 2;
  batch.audio_len = 5;
  batch.text_len = 4;
  batch.audio_mask = {1, 1, 1, 0, 0, 1, 1, 1, 1, 1};
  batch.text_mask = {1, 1, 0, 0, 1, 1, 1, 1};
  const Tensor a0 = random_tensor(rng, {5, 4}), a1 = random_tensor(rng, {5, 4});
  const Tensor t0 = random_tensor(rng, {4, 4}), t1 = random_tensor(rng, {4, 4});
  const ad::Var audio[] = {t.constant(a0), t.constant(a1)};
  const ad::Var text[] = {t.constant(t0), t.constant(t1)};
  const ot::SinkhornOptions opts;
  const double d0 = ot::sinkhorn_divergence(valid_rows(a0, batch.audio_mask_row(0)),
                                            valid_rows(t0, batch.text_mask_row(0)), opts).value;
  const double d1 = ot::sinkhorn_divergence(a1, t1, opts).value;
  const double loss = batch_ot_loss(audio, text, batch, opts).value().item();
  CHECK(loss == doctest::Approx((d0 + d1) / 2).epsilon(1e-15));

  Batch swapped = batch;
  std::swap(swapped.audio_mask, swapped.text_mask);
  std::swap(swapped.audio_len, swapped.text_len);
  CHECK(std::abs(batch_ot_loss(text, audio, swapped, opts).value().item() - loss) < 1e-10);

  std::vector<ot::SinkhornDiagnostics> diag;
  batch_ot_loss(audio, text, batch, opts, &diag);
  CHECK(diag.size() == 2);
}

TEST_CASE("batch OT loss is zero when every item has matching clouds") {
  Rng rng(7);
  ad::Tape t;
  Batch batch;
  batch.size = 3;
  batch.audio_len = batch.text_len = 3;
  batch.audio_mask = batch.text_mask = {1, 1, 1, 1, 1, 0, 1, 0, 0};
  std::vector<ad::Var> audio, text;
  for (int i = 0; i < 3; ++i) {
    const Tensor x = random_tensor(rng, {3, 5});
    audio.push_back(t.constant(x));
    text.push_back(t.constant(x));
  }
  CHECK(std::abs(batch_ot_loss(audio, text, batch, {}).value().item()) < 1e-6);
}

TEST_CASE("a small step on the OT term alone decreases it") {
  WhisqConfig cfg = toy_gradcheck_config();
  cfg.ot_weight = 1.0;
  Batch batch = toy_batch(cfg, 8);
  ModelParams p = init_params(cfg, 8);
  // Only the text projection moves; targets equal predictions so the task term is flat.
  const auto pred = forward(batch, p, cfg);
  batch.omq_targets = pred.y_omq;
  batch.ta_targets = pred.y_ta;
  const auto step = loss_and_grad(batch, p, cfg);
  REQUIRE(step.loss.ot > 1e-3);
  const auto names = p.names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i].rfind("proj.", 0) != 0) continue;
    Tensor& w = p.at(names[i]);
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= 1e-3 * step.grads[i][k];
  }
  const auto after = batch_loss(batch, p, cfg);
  CHECK(after.ot < step.loss.ot);
}

TEST_CASE("padded rows do not enter the OT term") {
  Rng rng(9);
  ad::Tape t;
  Batch batch;
  batch.size = 1;
  batch.audio_len = 4;
  batch.text_len = 3;
  batch.audio_mask = {1, 1, 0, 0};
  batch.text_mask = {1, 1, 0};
  Tensor a = random_tensor(rng, {4, 3}), x = random_tensor(rng, {3, 3});
  const double before = batch_ot_loss(std::vector{t.constant(a)}, std::vector{t.constant(x)}, batch, {}).value().item();
  for (std::size_t c = 0; c < 3; ++c) {
    a.at(2, c) = 50.0;
    a.at(3, c) = -9.0;
    x.at(2, c) = 1e4;
  }
  const double after = batch_ot_loss(std::vector{t.constant(a)}, std::vector{t.constant(x)}, batch, {}).value().item();
  CHECK(before == after);
}
