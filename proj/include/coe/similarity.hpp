#pragma once

#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "coe/event_model.hpp"
#include "coe/symbolic_world.hpp"

namespace coe {

/// Maps clips and descriptions into a shared embedding space.
/// Implementations must be safe to call from several threads at once.
class SimilarityModel {
 public:
  virtual ~SimilarityModel() = default;
  virtual Eigen::VectorXd embed_clip(const SymbolicClip& clip) const = 0;
  virtual Eigen::VectorXd embed_text(const std::string& description) const = 0;
};

/// L2-normalized symbol-count vectors over the world lexicon. Words that are
/// not lexicon symbols are ignored; empty inputs give the zero vector.
class SymbolOracle final : public SimilarityModel {
 public:
  explicit SymbolOracle(int lexicon_size);
  explicit SymbolOracle(const WorldConfig& world) : SymbolOracle(world.lexicon_size()) {}

  int dimension() const { return dim_; }
  Eigen::VectorXd embed_clip(const SymbolicClip& clip) const override;
  Eigen::VectorXd embed_text(const std::string& description) const override;

 private:
  int dim_;
};

/// Remote embedding service: POST /embed {"kind":"clip"|"text","payload":...}
/// answered by {"vector":[...]}. Any transport or format failure after the
/// configured retries throws kRewardUnavailable.
struct RemoteEmbeddingOptions {
  std::string url = "http://127.0.0.1:8080";
  double timeout_seconds = 5.0;
  int retries = 2;
};

class RemoteEmbeddingClient final : public SimilarityModel {
 public:
  explicit RemoteEmbeddingClient(RemoteEmbeddingOptions options);

  Eigen::VectorXd embed_clip(const SymbolicClip& clip) const override;
  Eigen::VectorXd embed_text(const std::string& description) const override;

 private:
  Eigen::VectorXd request(const nlohmann::json& body) const;

  RemoteEmbeddingOptions options_;
};

/// Cosine similarity; 0 when either vector is zero.
double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

enum class SimilarityMode { kVideoLevel, kFrameAveraged };

const char* to_string(SimilarityMode mode);
SimilarityMode similarity_mode_from_string(const std::string& s);

struct SimilarityResult {
  double r_s = 0.0;
  std::vector<double> per_event;  // s_j, in chain order
};

/// Mean over events of cos(embed(crop(video, event)), embed(description)).
/// Frame-averaged mode embeds each cropped frame separately and averages the
/// cosines; an empty crop scores 0. An empty chain scores 0.
SimilarityResult similarity_reward(const EventChain& chain, const SymbolicVideo& video, const SimilarityModel& model,
                                   SimilarityMode mode = SimilarityMode::kVideoLevel);

}  // namespace coe
