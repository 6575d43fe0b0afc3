#include "coe/similarity.hpp"

#include <chrono>
#include <sstream>

#include "coe/error.hpp"
#include "coe/vocabulary.hpp"

// after Eigen: <resolv.h> defines a `_res` macro
#include <httplib.h>

namespace coe {

namespace {

Eigen::VectorXd normalized(Eigen::VectorXd v) {
  const double n = v.norm();
  if (n > 0.0) v /= n;
  return v;
}

}  // namespace

SymbolOracle::SymbolOracle(int lexicon_size) : dim_(lexicon_size) {
  if (lexicon_size < 1) throw Error(ErrorKind::kConfigError, "oracle lexicon must be non-empty");
}

Eigen::VectorXd SymbolOracle::embed_clip(const SymbolicClip& clip) const {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(dim_);
  for (const auto& f : clip.frames) {
    for (int s : f.symbols) {
      if (s >= 0 && s < dim_) v(s) += 1.0;
    }
  }
  return normalized(std::move(v));
}

Eigen::VectorXd SymbolOracle::embed_text(const std::string& description) const {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(dim_);
  std::istringstream in(description);
  std::string word;
  while (in >> word) {
    const auto s = parse_symbol_word(word);
    if (s && *s < dim_) v(*s) += 1.0;
  }
  return normalized(std::move(v));
}

RemoteEmbeddingClient::RemoteEmbeddingClient(RemoteEmbeddingOptions options) : options_(std::move(options)) {
  if (options_.retries < 0 || !(options_.timeout_seconds > 0.0)) {
    throw Error(ErrorKind::kConfigError, "remote embedding: retries >= 0 and timeout > 0 required");
  }
}

Eigen::VectorXd RemoteEmbeddingClient::request(const nlohmann::json& body) const {
  const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(
      std::chrono::duration<double>(options_.timeout_seconds));
  const std::string payload = body.dump();
  std::string last_error = "no attempt made";
  for (int attempt = 0; attempt <= options_.retries; ++attempt) {
    // one client per request keeps concurrent callers independent
    httplib::Client cli(options_.url);
    cli.set_connection_timeout(timeout);
    cli.set_read_timeout(timeout);
    cli.set_write_timeout(timeout);
    auto res = cli.Post("/embed", payload, "application/json");
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status != 200) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    try {
      const auto j = nlohmann::json::parse(res->body);
      const auto& arr = j.at("vector");
      Eigen::VectorXd v(static_cast<Eigen::Index>(arr.size()));
      for (std::size_t i = 0; i < arr.size(); ++i) v(static_cast<Eigen::Index>(i)) = arr[i].get<double>();
      if (v.size() == 0 || !v.allFinite()) throw Error(ErrorKind::kRewardUnavailable, "empty or non-finite vector");
      return v;
    } catch (const std::exception& e) {
      last_error = std::string("bad response: ") + e.what();
    }
  }
  throw Error(ErrorKind::kRewardUnavailable, "remote embedding failed after " + std::to_string(options_.retries + 1) +
                                                 " attempt(s): " + last_error);
}

Eigen::VectorXd RemoteEmbeddingClient::embed_clip(const SymbolicClip& clip) const {
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : clip.frames) frames.push_back({{"t", f.t}, {"symbols", f.symbols}});
  return request({{"kind", "clip"}, {"payload", {{"frames", frames}}}});
}

Eigen::VectorXd RemoteEmbeddingClient::embed_text(const std::string& description) const {
  return request({{"kind", "text"}, {"payload", description}});
}

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw Error(ErrorKind::kLengthMismatch, "embedding dimensions differ");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

const char* to_string(SimilarityMode mode) {
  return mode == SimilarityMode::kVideoLevel ? "video" : "frame";
}

SimilarityMode similarity_mode_from_string(const std::string& s) {
  if (s == "video") return SimilarityMode::kVideoLevel;
  if (s == "frame") return SimilarityMode::kFrameAveraged;
  throw Error(ErrorKind::kConfigError, "similarity mode must be 'video' or 'frame', got '" + s + "'");
}

SimilarityResult similarity_reward(const EventChain& chain, const SymbolicVideo& video, const SimilarityModel& model,
                                   SimilarityMode mode) {
  SimilarityResult out;
  if (chain.empty()) return out;
  for (const auto& e : chain) {
    const auto clip = crop(video, e.t_start, e.t_end);
    const Eigen::VectorXd t = model.embed_text(e.description);
    double s = 0.0;
    if (mode == SimilarityMode::kVideoLevel) {
      s = cosine(model.embed_clip(clip), t);
    } else if (!clip.frames.empty()) {
      for (const auto& f : clip.frames) s += cosine(model.embed_clip(SymbolicClip{{f}}), t);
      s /= static_cast<double>(clip.frames.size());
    }
    out.per_event.push_back(s);
    out.r_s += s;
  }
  out.r_s /= static_cast<double>(chain.size());
  return out;
}

}  // namespace coe
