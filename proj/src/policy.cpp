#include "coe/policy.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "coe/symbolic_world.hpp"

namespace coe {

template struct PolicyParamsT<double>;
template ForwardCache<double> forward(const PolicyParamsT<double>&, std::span<const int>, int);
template void backward(const PolicyParamsT<double>&, const ForwardCache<double>&, const Matrix<double>&,
                       PolicyParamsT<double>&);

AttentionMasses aggregate_option_attention(const std::vector<Eigen::MatrixXd>& attention, const PromptLayout& layout) {
  if (layout.option.empty()) throw Error(ErrorKind::kEmptyOptionSegment, "prompt has no option tokens");
  if (attention.empty()) throw Error(ErrorKind::kInvariantViolation, "no attention matrices");
  AttentionMasses m;
  double count = 0.0;
  for (const auto& A : attention) {
    if (A.rows() < layout.option.end || A.cols() < layout.option.end) {
      throw Error(ErrorKind::kInvariantViolation, "attention matrix smaller than the prompt");
    }
    for (int q = layout.option.begin; q < layout.option.end; ++q) {
      m.visual += A.row(q).segment(layout.visual.begin, layout.visual.size()).sum();
      m.question += A.row(q).segment(layout.question.begin, layout.question.size()).sum();
      m.option += A.row(q).segment(layout.option.begin, layout.option.size()).sum();
      count += 1.0;
    }
  }
  m.visual /= count;
  m.question /= count;
  m.option /= count;
  return m;
}

AttentionMasses attention_profile(const PolicyParams& params, const PromptLayout& layout, int pad_token) {
  if (layout.option.empty()) throw Error(ErrorKind::kEmptyOptionSegment, "prompt has no option tokens");
  const auto fc = forward(params, layout.tokens, pad_token);
  std::vector<Eigen::MatrixXd> rows;
  for (const auto& l : fc.layers) {
    for (const auto& a : l.attn) rows.push_back(a);
  }
  return aggregate_option_attention(rows, layout);
}

CrossEntropyResult cross_entropy(const ForwardCache<double>& fc, std::span<const int> target_rows, double weight) {
  CrossEntropyResult r;
  const auto T = fc.logits.rows();
  r.dlogits = Eigen::MatrixXd::Zero(T, fc.logits.cols());
  for (int row : target_rows) {
    if (row < 0 || row + 1 >= T) throw Error(ErrorKind::kInvariantViolation, "target row out of range");
    const Eigen::RowVectorXd lp = log_softmax<double>(fc.logits.row(row));
    const int target = fc.tokens[static_cast<std::size_t>(row + 1)];
    r.loss -= weight * lp(target);
    r.dlogits.row(row) = weight * lp.array().exp().matrix();
    r.dlogits(row, target) -= weight;
  }
  return r;
}

namespace {

constexpr char kMagic[8] = {'C', 'O', 'E', 'C', 'K', 'P', 'T', '1'};
constexpr int kFormatVersion = 2;  // 2: layer norms

nlohmann::json config_json(const PolicyConfig& c) {
  return {{"vocab", c.vocab},     {"d_model", c.d_model},   {"heads", c.heads},          {"layers", c.layers},
          {"context", c.context}, {"ffn_mult", c.ffn_mult}, {"init_scale", c.init_scale}};
}

}  // namespace

std::string shape_manifest_json(const PolicyParams& params) {
  nlohmann::json tensors = nlohmann::json::array();
  params.for_each_tensor([&](const std::string& name, const Eigen::MatrixXd& m) {
    tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  });
  return nlohmann::json{{"format", "coe.policy"}, {"version", kFormatVersion}, {"scalar", "f64"}, {"layout", "column-major"},
                        {"config", config_json(params.config)}, {"tensors", tensors}}
      .dump();
}

void save_checkpoint(const PolicyParams& params, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::kIoError, "cannot open " + tmp);
    const std::string manifest = shape_manifest_json(params);
    const std::uint64_t n = manifest.size();
    out.write(kMagic, sizeof(kMagic));
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    out.write(manifest.data(), static_cast<std::streamsize>(n));
    params.for_each_tensor([&](const std::string&, const Eigen::MatrixXd& m) {
      out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    });
    if (!out) throw Error(ErrorKind::kIoError, "write failed for " + tmp);
  }
  std::rename(tmp.c_str(), path.c_str());
}

PolicyParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIoError, "cannot open " + path);
  char magic[8];
  std::uint64_t n = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0 || n > (1u << 24)) {
    throw Error(ErrorKind::kIoError, path + ": not a policy checkpoint");
  }
  std::string manifest(n, '\0');
  in.read(manifest.data(), static_cast<std::streamsize>(n));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(manifest);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kIoError, path + ": bad manifest: " + e.what());
  }
  if (j.value("version", 0) != kFormatVersion) {
    throw Error(ErrorKind::kIoError, path + ": unsupported checkpoint version " + j.value("version", nlohmann::json()).dump());
  }
  const auto& c = j.at("config");
  PolicyConfig cfg;
  cfg.vocab = c.at("vocab");
  cfg.d_model = c.at("d_model");
  cfg.heads = c.at("heads");
  cfg.layers = c.at("layers");
  cfg.context = c.at("context");
  cfg.ffn_mult = c.at("ffn_mult");
  cfg.init_scale = c.value("init_scale", 1.0);
  auto params = PolicyParams::zeros(cfg);
  std::size_t idx = 0;
  const auto& tensors = j.at("tensors");
  params.for_each_tensor([&](const std::string& name, Eigen::MatrixXd& m) {
    const auto& t = tensors.at(idx++);
    if (t.at("name") != name || t.at("rows") != m.rows() || t.at("cols") != m.cols()) {
      throw Error(ErrorKind::kIoError, path + ": tensor shape mismatch at " + name);
    }
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  });
  if (!in) throw Error(ErrorKind::kIoError, path + ": truncated checkpoint");
  return params;
}

}  // namespace coe
