#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "coe/policy.hpp"
#include "coe/symbolic_world.hpp"
#include "gradient_check.hpp"

using namespace coe;

namespace {

PolicyConfig tiny_config(int layers = 2) {
  PolicyConfig c;
  c.vocab = 16;
  c.d_model = 8;
  c.heads = 2;
  c.layers = layers;
  c.context = 32;
  return c;
}

std::vector<int> random_tokens(Rng& rng, int n, int vocab, int lo = 0) {
  std::vector<int> out;
  for (int i = 0; i < n; ++i) out.push_back(lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab - lo))));
  return out;
}

}  // namespace

TEST_CASE("logits are causal: future tokens never change earlier rows") {
  const auto params = init_params<double>(tiny_config(), 3);
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_tokens(rng, 20, 16, 1);
    auto b = a;
    const int cut = 1 + static_cast<int>(rng.below(18));
    std::reverse(b.begin() + cut, b.end());  // permute the future
    b.back() = 1 + static_cast<int>(rng.below(15));
    const auto fa = forward(params, a, -1);
    const auto fb = forward(params, b, -1);
    CHECK((fa.logits.topRows(cut) - fb.logits.topRows(cut)).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("attention rows are softmax-normalized on random inputs") {
  const auto params = init_params<double>(tiny_config(), 5);
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(30));
    auto toks = random_tokens(rng, n, 16);
    const auto fc = forward(params, toks, 0);
    for (const auto& l : fc.layers) {
      for (const auto& A : l.attn) {
        CHECK((A.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-6);
        CHECK(A.minCoeff() >= 0.0);
      }
    }
  }
}

TEST_CASE("padding keys are invisible to real tokens") {
  const auto params = init_params<double>(tiny_config(), 6);
  const std::vector<int> padded = {0, 0, 0, 5, 6, 7};
  const auto fc = forward(params, padded, 0);
  for (const auto& l : fc.layers) {
    for (const auto& A : l.attn) {
      for (int q = 3; q < 6; ++q) CHECK(A.row(q).head(3).sum() == 0.0);
    }
  }
}

TEST_CASE("context overflow is signalled") {
  const auto params = init_params<double>(tiny_config(), 1);
  std::vector<int> toks(33, 1);
  CHECK_THROWS_AS(forward(params, toks, 0), Error);
  SampleOptions opt;
  opt.max_new = 10;
  std::vector<int> prompt(30, 1);
  CHECK_THROWS_AS(sample_completion(params, prompt, opt, 1), Error);
}

TEST_CASE("cross-entropy gradient matches central finite differences") {
  for (int layers : {1, 2}) {
    const auto params = init_params<double>(tiny_config(layers), 21 + layers);
    Rng rng(7);
    const auto toks = random_tokens(rng, 24, 16);
    std::vector<int> rows(12);
    std::iota(rows.begin(), rows.end(), 10);
    auto loss = [&](const PolicyParams& p) { return cross_entropy(forward(p, toks, 0), rows, 1.0 / 12).loss; };
    const auto fc = forward(params, toks, 0);
    const auto ce = cross_entropy(fc, rows, 1.0 / 12);
    auto grad = GradientBuffer::zeros(params.config);
    backward(params, fc, ce.dlogits, grad);
    const auto errs = testing::finite_difference_check(params, grad, loss);
    for (const auto& e : errs) {
      INFO(e.name << " rel=" << e.relative);
      CHECK(e.relative < 1e-4);
    }
  }
}

TEST_CASE("constant loss gives zero gradient") {
  const auto params = init_params<double>(tiny_config(), 2);
  const std::vector<int> toks = {1, 2, 3, 4};
  const auto fc = forward(params, toks, 0);
  auto grad = GradientBuffer::zeros(params.config);
  const Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(4, 16);
  backward(params, fc, zero, grad);
  double mx = 0.0;
  grad.for_each_tensor([&](const std::string&, const Eigen::MatrixXd& m) { mx = std::max(mx, m.cwiseAbs().maxCoeff()); });
  CHECK(mx == 0.0);
}

TEST_CASE("non-finite loss gradient is rejected") {
  const auto params = init_params<double>(tiny_config(), 2);
  const std::vector<int> toks = {1, 2, 3};
  const auto fc = forward(params, toks, 0);
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(3, 16);
  d(1, 1) = std::nan("");
  auto grad = GradientBuffer::zeros(params.config);
  CHECK_THROWS_AS(backward(params, fc, d, grad), Error);
}

TEST_CASE("output-bias gradient of summed log-probs is one-hot minus softmax") {
  const auto params = init_params<double>(tiny_config(), 4);
  const std::vector<int> prompt = {1, 2, 3};
  const std::vector<int> completion = {4, 5, 6, 7};
  const auto seq = concat_tokens<double>(prompt, completion);
  const auto fc = forward(params, seq, 0);
  std::vector<int> rows = {2, 3, 4, 5};
  // loss = -sum log p  =>  d/db = sum(softmax - onehot)
  const auto ce = cross_entropy(fc, rows, 1.0);
  auto grad = GradientBuffer::zeros(params.config);
  backward(params, fc, ce.dlogits, grad);
  Eigen::RowVectorXd expected = Eigen::RowVectorXd::Zero(16);
  for (int r : rows) {
    Eigen::RowVectorXd p = log_softmax<double>(fc.logits.row(r)).array().exp().matrix();
    p(seq[static_cast<std::size_t>(r + 1)]) -= 1.0;
    expected -= p;  // gradient of +sum log p
  }
  CHECK((-grad.b_out - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("log-probs: trivial vocab, uniform logits, chain rule") {
  SUBCASE("vocab of size one") {
    auto c = tiny_config();
    c.vocab = 1;
    const auto params = init_params<double>(c, 1);
    const std::vector<int> prompt = {0, 0};
    const std::vector<int> comp = {0, 0, 0};
    for (double lp : per_token_log_probs(params, prompt, comp, -1)) CHECK(lp == doctest::Approx(0.0).epsilon(1e-15));
  }
  SUBCASE("uniform logits over 64 tokens") {
    auto c = tiny_config();
    c.vocab = 64;
    auto params = init_params<double>(c, 1);
    params.w_out.setZero();
    params.b_out.setZero();
    const std::vector<int> prompt = {1, 2};
    const std::vector<int> comp = {3, 40, 63};
    for (double lp : per_token_log_probs(params, prompt, comp, 0)) CHECK(lp == doctest::Approx(-std::log(64.0)).epsilon(1e-12));
    CHECK(-std::log(64.0) == doctest::Approx(-4.1589).epsilon(1e-4));
  }
  SUBCASE("sum equals the brute-force chain-rule product") {
    const auto params = init_params<double>(tiny_config(), 9);
    const std::vector<int> prompt = {3, 1, 4};
    const std::vector<int> comp = {1, 5, 9, 2, 6};
    const auto lps = per_token_log_probs(params, prompt, comp, 0);
    double sum = 0.0;
    for (double v : lps) sum += v;
    // brute force: one forward per prefix, product of softmax probabilities
    double product = 1.0;
    std::vector<int> prefix = prompt;
    for (int tok : comp) {
      const auto fc = forward(params, prefix, 0);
      const Eigen::RowVectorXd z = fc.logits.row(fc.logits.rows() - 1);
      const Eigen::RowVectorXd e = (z.array() - z.maxCoeff()).exp().matrix();
      product *= e(tok) / e.sum();
      prefix.push_back(tok);
    }
    CHECK(sum == doctest::Approx(std::log(product)).epsilon(1e-12));
  }
}

TEST_CASE("exact KL: zero at equality, ln 2 closed form, non-negative") {
  SUBCASE("identity") {
    const auto params = init_params<double>(tiny_config(), 1);
    const std::vector<int> prompt = {1, 2};
    const std::vector<int> comp = {3, 4, 5};
    CHECK(exact_kl(params, params, prompt, comp) == 0.0);
  }
  SUBCASE("(1,0) vs (1/2,1/2)") {
    auto c = tiny_config();
    c.vocab = 2;
    auto a = init_params<double>(c, 1);
    a.w_out.setZero();
    a.b_out << 60.0, -60.0;
    auto b = a;
    b.b_out << 0.0, 0.0;
    const std::vector<int> prompt = {1};
    const std::vector<int> comp = {0};
    CHECK(exact_kl(a, b, prompt, comp) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("non-negative on random pairs") {
    Rng rng(99);
    for (int i = 0; i < 1000; ++i) {
      const auto a = init_params<double>(tiny_config(1), 1000 + i);
      const auto b = init_params<double>(tiny_config(1), 5000 + i);
      const auto prompt = random_tokens(rng, 3, 16);
      const auto comp = random_tokens(rng, 3, 16);
      CHECK(exact_kl(a, b, prompt, comp) >= 0.0);
    }
  }
}

TEST_CASE("sampling: greedy and seeded determinism") {
  const auto params = init_params<double>(tiny_config(), 8);
  const std::vector<int> prompt = {1, 2, 3};
  SampleOptions opt;
  opt.max_new = 12;
  opt.temperature = 0.0;
  const auto g1 = sample_completion(params, prompt, opt, 1);
  const auto g2 = sample_completion(params, prompt, opt, 2);
  CHECK(g1 == g2);
  opt.temperature = 1.0;
  CHECK(sample_completion(params, prompt, opt, 77) == sample_completion(params, prompt, opt, 77));
  opt.stop_token = 5;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto out = sample_completion(params, prompt, opt, s);
    for (std::size_t i = 0; i + 1 < out.size(); ++i) CHECK(out[i] != 5);
  }
}

TEST_CASE("decoder matches the full forward pass") {
  const auto params = init_params<double>(tiny_config(), 13);
  const std::vector<int> toks = {0, 0, 4, 9, 2, 11, 3};
  const auto fc = forward(params, toks, 0);
  Decoder<double> dec(params, 0);
  for (std::size_t t = 0; t < toks.size(); ++t) {
    const Eigen::RowVectorXd z = dec.step(toks[t]);
    CHECK((z - fc.logits.row(static_cast<Eigen::Index>(t))).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("single-step sample frequencies match softmax within 3 sigma") {
  auto params = init_params<double>(tiny_config(), 31);
  params.b_out.row(0).setLinSpaced(16, -1.5, 1.5);
  const std::vector<int> prompt = {2, 7};
  SampleOptions opt;
  opt.max_new = 1;
  const int n = 10000;
  std::vector<int> counts(16, 0);
  for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(sample_completion(params, prompt, opt, derive_seed(5, i))[0])];
  const auto fc = forward(params, prompt, 0);
  const Eigen::RowVectorXd p = log_softmax<double>(fc.logits.row(1)).array().exp().matrix();
  for (int v = 0; v < 16; ++v) {
    const double sigma = std::sqrt(n * p(v) * (1 - p(v)));
    CHECK(std::abs(counts[static_cast<std::size_t>(v)] - n * p(v)) <= 3.0 * sigma + 1e-9);
  }
}

TEST_CASE("option attention aggregation") {
  PromptLayout layout;
  layout.padding = {0, 0};
  layout.visual = {0, 30};
  layout.question = {30, 40};
  layout.option = {40, 50};
  SUBCASE("uniform rows give mass proportional to segment size") {
    std::vector<Eigen::MatrixXd> att(4, Eigen::MatrixXd::Constant(50, 50, 1.0 / 50));
    const auto m = aggregate_option_attention(att, layout);
    CHECK(m.visual == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(m.question == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(m.visual + m.question + m.option == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("hand-built heads and head-order symmetry") {
    Eigen::MatrixXd h0 = Eigen::MatrixXd::Zero(50, 50), h1 = Eigen::MatrixXd::Zero(50, 50);
    for (int q = 40; q < 50; ++q) {
      h0(q, 0) = 1.0;               // all on the first frame token
      h1(q, 35) = 0.5;              // half on the question
      h1(q, q) = 0.5;               // half on itself
    }
    const auto m = aggregate_option_attention({h0, h1}, layout);
    CHECK(m.visual == 0.5);
    CHECK(m.question == 0.25);
    CHECK(m.option == 0.25);
    const auto swapped = aggregate_option_attention({h1, h0}, layout);
    CHECK(swapped.visual == m.visual);
    CHECK(swapped.question == m.question);
  }
  SUBCASE("open-set prompt has no option queries") {
    layout.option = {40, 40};
    std::vector<Eigen::MatrixXd> att(1, Eigen::MatrixXd::Constant(40, 40, 1.0 / 40));
    CHECK_THROWS_AS(aggregate_option_attention(att, layout), Error);
  }
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  const auto params = init_params<double>(tiny_config(), 17);
  const auto path = (std::filesystem::temp_directory_path() / "coe_policy_test.bin").string();
  save_checkpoint(params, path);
  const auto back = load_checkpoint(path);
  CHECK(back.checksum() == params.checksum());
  CHECK(back.config.layers == params.config.layers);
  std::filesystem::remove(path);
}
