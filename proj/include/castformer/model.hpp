#pragma once

#include <optional>
#include <string>
#include <vector>

#include "castformer/cpe.hpp"
#include "castformer/encoder.hpp"
#include "castformer/fsn.hpp"
#include "castformer/rsf.hpp"

namespace castformer {

enum class Stage { Rsf, Cpe, Fsn };

const char* to_string(Stage s);
// Comma- or dash-separated stage list ("rsf,cpe,fsn", "cpe-rsf-fsn"); "none"
// or "tbase" is the empty pipeline.
std::vector<Stage> parse_pipeline(const std::string& s);
std::string pipeline_string(const std::vector<Stage>& p);

struct ModelConfig {
  EncoderConfig encoder;
  RsfConfig rsf;
  CpeConfig cpe;
  FsnConfig fsn;
  std::size_t num_classes = 5;
  std::vector<Stage> pipeline = {Stage::Rsf, Stage::Cpe, Stage::Fsn};

  bool has(Stage s) const;
  void validate() const;
};

// Encoder-ready input. interior/exterior carry the speed channel already
// appended when encoder.use_speed is set; speed is the (B,1) FSN scalar.
struct DualStreamBatch {
  Tensor interior;  // (B,T,d_in_interior[+1])
  Tensor exterior;  // (B,T,d_in_exterior[+1])
  Tensor speed;     // (B,1) or undefined
  std::vector<int> labels;

  std::size_t batch_size() const { return labels.size(); }
};

struct ForwardTrace {
  Tensor f_in, f_out;  // encoder outputs (B,T,D)
  std::optional<RsfOutput> rsf;
  std::optional<CpeOutput> cpe;
  std::optional<FsnOutput> fsn;
  Tensor summary_in, summary_out;  // (B,D) features handed to the head
  Tensor joint_logits;             // (B,M)

  bool has_branches() const { return fsn.has_value(); }
  bool has_intent() const { return cpe.has_value(); }
};

// Dual-stream encoders followed by the configured stage sequence. With the
// default order this is encode -> RSF -> CPE -> FSN; an empty pipeline is the
// last-frame concatenation baseline. Stage interfacing for other orders:
//  * a stage listed first consumes the encoder outputs directly;
//  * CPE with an RSF stage after it refines every frame, otherwise only the
//    final frame is replaced by h;
//  * FSN reads the current last-frame features (zero intention token when no
//    CPE ran before it) and writes r_in/r_out back into the final frame;
//  * the FSN confidence-weighted head (or, without FSN, a linear classifier
//    over [summary_in, summary_out]) runs after the last stage.
class CaSTFormer {
 public:
  CaSTFormer(const ModelConfig& cfg, std::uint64_t seed);
  CaSTFormer(const CaSTFormer&) = delete;
  CaSTFormer& operator=(const CaSTFormer&) = delete;

  ForwardTrace forward(const DualStreamBatch& batch, const ForwardContext& ctx) const;

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  const StreamEncoder& encoder(Stream s) const {
    return s == Stream::Interior ? enc_in_ : enc_out_;
  }
  const ReciprocalShiftFusion& rsf() const { return rsf_; }
  const CausalPatternExtraction& cpe() const { return cpe_; }
  const FeatureSynthesis& fsn() const { return fsn_; }

 private:
  ModelConfig cfg_;
  ParamStore params_;
  StreamEncoder enc_in_, enc_out_;
  ReciprocalShiftFusion rsf_;
  CausalPatternExtraction cpe_;
  FeatureSynthesis fsn_;
  Linear head_;
};

}  // namespace castformer
