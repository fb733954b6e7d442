#include <gtest/gtest.h>

#include <cmath>
#include <deque>

#include "brivl/contrastive.hpp"
#include "test_util.hpp"

using namespace brivl;
using brivl::testing::random_dim;
using brivl::testing::random_tensor;
using brivl::testing::random_unit_rows;

namespace {

using Rows = std::vector<std::vector<double>>;

Rows rows_of(const Tensor& t) {
  Rows r(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) r[i][j] = t.data()[i * t.dim(1) + j];
  return r;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// -1/N sum_i log( exp(z_i.p_i/tau) / sum_{q in Q} exp(z_i.q/tau) ), evaluated
// straight from the definition with an explicit positive term.
double brute_info_nce(const Rows& anchors, const Rows& queue, const std::vector<std::size_t>& positive, double tau) {
  double total = 0.0;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const double pos = dot(anchors[i], queue[positive[i]]) / tau;
    std::vector<double> terms{pos};
    for (std::size_t q = 0; q < queue.size(); ++q)
      if (q != positive[i]) terms.push_back(dot(anchors[i], queue[q]) / tau);
    const double mx = *std::max_element(terms.begin(), terms.end());
    double z = 0.0;
    for (double t : terms) z += std::exp(t - mx);
    total += -(pos - mx - std::log(z));
  }
  return total / anchors.size();
}

double brute_in_batch(const Rows& img, const Rows& txt, double tau) {
  const std::size_t n = img.size();
  std::vector<std::size_t> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = i;
  return 0.5 * (brute_info_nce(img, txt, diag, tau) + brute_info_nce(txt, img, diag, tau));
}

struct QueueCase {
  NegativeQueue queue;
  std::vector<std::uint64_t> ids;  // ids of the newest batch (the positives)
  Rows rows;                       // queue contents, oldest first
};

QueueCase random_queue_case(SplitMix64& rng, std::size_t nb, std::size_t q_entries, std::size_t d) {
  QueueCase c{NegativeQueue(q_entries, d), {}, {}};
  for (std::size_t filled = nb; filled < q_entries; filled += nb) c.queue.enqueue(random_unit_rows(nb, d, rng));
  c.ids = c.queue.enqueue(random_unit_rows(nb, d, rng));
  c.rows = rows_of(c.queue.entries());
  return c;
}

std::vector<std::size_t> positions(const NegativeQueue& q, const std::vector<std::uint64_t>& ids) {
  std::vector<std::size_t> p;
  for (auto id : ids) p.push_back(*q.position_of(id));
  return p;
}

}  // namespace

TEST(Momentum, TrivialCoefficients) {
  SplitMix64 rng(1);
  ParamSet online, shadow;
  online.add("w", random_tensor({3, 4}, rng));
  shadow.add("w", random_tensor({3, 4}, rng));
  const auto before = shadow.at("w").values();
  momentum_update(online, shadow, 1.0f);
  EXPECT_EQ(shadow.at("w").values(), before);
  momentum_update(online, shadow, 0.0f);
  EXPECT_EQ(shadow.at("w").values(), online.at("w").values());
}

TEST(Momentum, ScalarSubstitution) {
  ParamSet online, shadow;
  online.add("w", Tensor::scalar(1.0f));
  shadow.add("w", Tensor::scalar(0.0f));
  momentum_update(online, shadow, 0.99f);
  EXPECT_NEAR(shadow.at("w").item(), 0.01f, 1e-7);
}

TEST(Momentum, ConvergesGeometricallyWithRatioM) {
  SplitMix64 rng(2);
  for (float m : {0.5f, 0.9f, 0.99f}) {
    ParamSet online, shadow;
    online.add("w", random_tensor({5}, rng, false, 10.0f, 20.0f));
    shadow.add("w", random_tensor({5}, rng, false, -20.0f, -10.0f));
    auto gap = [&] {
      double s = 0.0;
      for (std::size_t i = 0; i < 5; ++i) {
        const double d = static_cast<double>(shadow.at("w").data()[i]) - online.at("w").data()[i];
        s += d * d;
      }
      return std::sqrt(s);
    };
    double prev = gap();
    for (int it = 0; it < 100; ++it) {
      momentum_update(online, shadow, m);
      const double now = gap();
      if (prev > 1e-2) {
        EXPECT_NEAR(now / prev, m, 1e-6 + 2e-7 * 30.0 / prev) << "m=" << m << " it=" << it;
      }
      prev = now;
    }
  }
}

TEST(Momentum, RejectsMismatchedShapesAndBadM) {
  ParamSet a, b;
  a.add("w", Tensor::zeros({2}));
  b.add("w", Tensor::zeros({3}));
  EXPECT_THROW(momentum_update(a, b, 0.5f), ShapeError);
  ParamSet c;
  c.add("w", Tensor::zeros({2}));
  EXPECT_THROW(momentum_update(a, c, 1.5f), InvalidArgument);
}

TEST(Queue, MatchesReferenceFifoOverRandomPushSequences) {
  SplitMix64 rng(3);
  for (int seq = 0; seq < 1000; ++seq) {
    const std::size_t d = random_dim(rng, 1, 3), cap = random_dim(rng, 1, 12);
    NegativeQueue q(cap, d);
    std::deque<std::vector<float>> ref;
    std::uint64_t next = 0;
    const std::size_t pushes = random_dim(rng, 1, 8);
    for (std::size_t p = 0; p < pushes; ++p) {
      const std::size_t n = random_dim(rng, 1, cap);
      const Tensor batch = random_tensor({n, d}, rng);
      const auto ids = q.enqueue(batch);
      for (std::size_t r = 0; r < n; ++r) {
        ref.emplace_back(batch.values().begin() + r * d, batch.values().begin() + (r + 1) * d);
        if (ref.size() > cap) ref.pop_front();
        EXPECT_EQ(ids[r], next++);
      }
      ASSERT_EQ(q.size(), ref.size());
      for (std::size_t i = 0; i < ref.size(); ++i) {
        const auto e = q.entry(i);
        ASSERT_EQ(std::vector<float>(e.begin(), e.end()), ref[i]) << "seq " << seq;
      }
      EXPECT_LE(q.size(), q.capacity());
    }
  }
}

TEST(Queue, EvictedIdsAreNotFound) {
  NegativeQueue q(4, 1);
  const auto first = q.enqueue(Tensor::from({2, 1}, {1, 2}));
  q.enqueue(Tensor::from({4, 1}, {3, 4, 5, 6}));
  EXPECT_FALSE(q.position_of(first[0]).has_value());
  EXPECT_EQ(q.position_of(5).value(), 3u);
  EXPECT_THROW(q.enqueue(Tensor::zeros({5, 1})), InvalidArgument);
  EXPECT_THROW(q.enqueue(Tensor::zeros({1, 2})), ShapeError);
}

TEST(InfoNce, MatchesBruteForceOnRandomInstances) {
  SplitMix64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t nb = random_dim(rng, 1, 8), d = random_dim(rng, 2, 16);
    const std::size_t q_entries = nb * random_dim(rng, 1, 64 / nb);
    QueueCase c = random_queue_case(rng, nb, q_entries, d);
    const Tensor anchors = random_unit_rows(nb, d, rng);
    const double tau = rng.uniform(0.05f, 1.0f);
    std::vector<double> a(anchors.values().begin(), anchors.values().end());
    const DTensor ad = DTensor::from(anchors.shape(), a);
    const double got = info_nce(ad, c.queue, c.ids, tau).item();
    EXPECT_NEAR(got, brute_info_nce(rows_of(anchors), c.rows, positions(c.queue, c.ids), tau), 1e-6);
  }
}

TEST(InfoNce, FloatInstantiationTracksTheOracle) {
  SplitMix64 rng(5);
  QueueCase c = random_queue_case(rng, 4, 16, 8);
  const Tensor anchors = random_unit_rows(4, 8, rng);
  EXPECT_NEAR(info_nce(anchors, c.queue, c.ids, 0.07f).item(),
              brute_info_nce(rows_of(anchors), c.rows, positions(c.queue, c.ids), static_cast<double>(0.07f)), 1e-4);
}

TEST(InfoNce, QueueHoldingOnlyThePositiveGivesZero) {
  NegativeQueue q(1, 2);
  const auto ids = q.enqueue(Tensor::from({1, 2}, {0.6f, 0.8f}));
  EXPECT_EQ(info_nce(Tensor::from({1, 2}, {1.0f, 0.0f}), q, ids, 0.07f).item(), 0.0f);
}

TEST(InfoNce, OrthogonalNegativesClosedForm) {
  const std::size_t d = 8, n_q = 8;
  NegativeQueue q(n_q, d);
  std::vector<float> eye(n_q * d, 0.0f);
  for (std::size_t i = 0; i < n_q; ++i) eye[i * d + i] = 1.0f;
  const auto ids = q.enqueue(Tensor::from({n_q, d}, eye));
  const Tensor anchors = ops::slice(Tensor::from({n_q, d}, eye), 0, 6, 8);
  const std::vector<std::uint64_t> pos{ids[6], ids[7]};
  const double expect = std::log1p((n_q - 1) * std::exp(-1.0 / 0.07));
  EXPECT_NEAR(info_nce(anchors, q, pos, 0.07f).item(), expect, 1e-7);
}

TEST(InfoNce, RejectsMissingPositiveAndBadTau) {
  NegativeQueue q(2, 2);
  const auto ids = q.enqueue(Tensor::from({1, 2}, {1, 0}));
  const Tensor a = Tensor::from({1, 2}, {1, 0});
  EXPECT_THROW(info_nce(a, q, {ids[0] + 5}, 0.07f), InvalidArgument);
  EXPECT_THROW(info_nce(a, q, ids, 0.0f), InvalidArgument);
  EXPECT_THROW(info_nce(a, q, {ids[0], ids[0]}, 0.07f), ShapeError);
}

TEST(InfoNce, GradientReachesAnchorsOnly) {
  SplitMix64 rng(6);
  QueueCase c = random_queue_case(rng, 2, 8, 4);
  Tensor anchors = random_tensor({2, 4}, rng, true);
  info_nce(ops::l2_normalize(anchors), c.queue, c.ids, 0.07f).backward();
  EXPECT_TRUE(anchors.has_grad());
  EXPECT_FALSE(c.queue.entries().requires_grad());
}

TEST(TotalLoss, SumsTheTwoDirections) {
  SplitMix64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t nb = random_dim(rng, 1, 8), d = random_dim(rng, 2, 12);
    const std::size_t q_entries = nb * random_dim(rng, 1, 64 / nb);
    QueueCase ti = random_queue_case(rng, nb, q_entries, d), tt = random_queue_case(rng, nb, q_entries, d);
    const Tensor zi = random_unit_rows(nb, d, rng), zt = random_unit_rows(nb, d, rng);
    auto to_d = [](const Tensor& t) {
      return DTensor::from(t.shape(), std::vector<double>(t.values().begin(), t.values().end()));
    };
    const double tau = 0.07;
    const auto l = total_loss(to_d(zi), to_d(zt), tt.queue, tt.ids, ti.queue, ti.ids, tau);
    const double i2t = brute_info_nce(rows_of(zi), tt.rows, positions(tt.queue, tt.ids), tau);
    const double t2i = brute_info_nce(rows_of(zt), ti.rows, positions(ti.queue, ti.ids), tau);
    EXPECT_NEAR(l.i2t.item(), i2t, 1e-6);
    EXPECT_NEAR(l.t2i.item(), t2i, 1e-6);
    EXPECT_NEAR(l.total.item(), i2t + t2i, 1e-6);
    EXPECT_GE(l.total.item(), 0.0);
  }
}

TEST(TotalLoss, SymmetricSetupGivesEqualDirections) {
  SplitMix64 rng(8);
  QueueCase c = random_queue_case(rng, 4, 16, 6);
  const Tensor z = random_unit_rows(4, 6, rng);
  const LossTerms l = total_loss(z, z, c.queue, c.ids, c.queue, c.ids, 0.07f);
  EXPECT_EQ(l.i2t.item(), l.t2i.item());
}

TEST(InBatch, MatchesBruteForce) {
  SplitMix64 rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t nb = random_dim(rng, 2, 8), d = random_dim(rng, 2, 12);
    const Tensor zi = random_unit_rows(nb, d, rng), zt = random_unit_rows(nb, d, rng);
    auto to_d = [](const Tensor& t) {
      return DTensor::from(t.shape(), std::vector<double>(t.values().begin(), t.values().end()));
    };
    EXPECT_NEAR(in_batch_loss(to_d(zi), to_d(zt), 0.07).total.item(), brute_in_batch(rows_of(zi), rows_of(zt), 0.07),
                1e-6);
  }
}

TEST(InBatch, TwoOrthogonalPairsClosedForm) {
  const Tensor e = Tensor::from({2, 2}, {1, 0, 0, 1});
  const double expect = std::log1p(std::exp(-1.0 / 0.07));
  EXPECT_NEAR(in_batch_loss(e, e, 0.07f).total.item(), expect, 1e-7);
  EXPECT_THROW(in_batch_loss(Tensor::from({1, 2}, {1, 0}), Tensor::from({1, 2}, {1, 0}), 0.07f), InvalidArgument);
}

TEST(InBatch, LargeScaleIdentityGoesToZero) {
  const Tensor e = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_LT(in_batch_loss(e, e, 0.001f).total.item(), 1e-12);
}

TEST(Degenerate, QueueLossEqualsInBatchHalfWhenQueueIsTheBatch) {
  // N_q = N_b, the queue holds exactly this batch's momentum embeddings and
  // the momentum towers equal the online ones (m = 0), so the text queue is
  // the batch's own text embeddings.
  SplitMix64 rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t nb = random_dim(rng, 2, 8), d = random_dim(rng, 2, 12);
    const Tensor zi = random_unit_rows(nb, d, rng), zt = random_unit_rows(nb, d, rng);
    NegativeQueue tq(nb, d), iq(nb, d);
    tq.enqueue(random_unit_rows(nb, d, rng));  // stale content, fully evicted below
    const auto tid = tq.enqueue(zt);
    const auto iid = iq.enqueue(zi);
    const auto q = total_loss(zi, zt, tq, tid, iq, iid, 0.07f);
    const auto b = in_batch_loss(zi, zt, 0.07f);
    EXPECT_NEAR(q.i2t.item(), b.i2t.item(), 1e-5);
    EXPECT_NEAR(q.t2i.item(), b.t2i.item(), 1e-5);
  }
}
