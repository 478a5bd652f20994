#include "castformer/model.hpp"

#include <algorithm>
#include <sstream>

#include "castformer/errors.hpp"

namespace castformer {

const char* to_string(Stage s) {
  switch (s) {
    case Stage::Rsf: return "rsf";
    case Stage::Cpe: return "cpe";
    case Stage::Fsn: return "fsn";
  }
  return "?";
}

std::vector<Stage> parse_pipeline(const std::string& s) {
  std::vector<Stage> out;
  if (s == "none" || s == "tbase" || s.empty()) return out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ',')) {
    std::istringstream parts(item);
    std::string name;
    while (std::getline(parts, name, '-')) {
      if (name == "rsf") out.push_back(Stage::Rsf);
      else if (name == "cpe") out.push_back(Stage::Cpe);
      else if (name == "fsn") out.push_back(Stage::Fsn);
      else throw ConfigError("unknown pipeline stage '" + name + "' (rsf, cpe, fsn)");
    }
  }
  return out;
}

std::string pipeline_string(const std::vector<Stage>& p) {
  if (p.empty()) return "none";
  std::string s;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (i) s += ',';
    s += to_string(p[i]);
  }
  return s;
}

bool ModelConfig::has(Stage s) const {
  return std::find(pipeline.begin(), pipeline.end(), s) != pipeline.end();
}

void ModelConfig::validate() const {
  encoder.validate();
  if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  for (Stage s : {Stage::Rsf, Stage::Cpe, Stage::Fsn}) {
    if (std::count(pipeline.begin(), pipeline.end(), s) > 1) {
      throw ConfigError(std::string("pipeline lists ") + to_string(s) + " more than once");
    }
  }
  if (has(Stage::Rsf)) rsf.validate(encoder.d_model);
  if (has(Stage::Cpe)) cpe.validate(encoder.d_model);
  if (cpe.num_classes != num_classes || fsn.num_classes != num_classes) {
    throw ConfigError("num_classes must agree across cpe, fsn and model");
  }
}

CaSTFormer::CaSTFormer(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const std::size_t D = cfg_.encoder.d_model;
  enc_in_ = StreamEncoder(params_, cfg_.encoder, Stream::Interior, rng);
  enc_out_ = StreamEncoder(params_, cfg_.encoder, Stream::Exterior, rng);
  if (cfg_.has(Stage::Rsf)) rsf_ = ReciprocalShiftFusion(params_, D, cfg_.rsf, rng);
  if (cfg_.has(Stage::Cpe)) cpe_ = CausalPatternExtraction(params_, D, cfg_.cpe, rng);
  if (cfg_.has(Stage::Fsn)) {
    fsn_ = FeatureSynthesis(params_, D, cfg_.fsn, rng);
  } else {
    head_ = Linear::create(params_, "head.cls", 2 * D, cfg_.num_classes, true, rng);
  }
}

namespace {

Tensor replace_last(const Tensor& seq, const Tensor& last) {
  const std::size_t B = seq.dim(0), T = seq.dim(1), D = seq.dim(2);
  Tensor tail = reshape(last, {B, 1, D});
  if (T == 1) return tail;
  return concat({narrow(seq, 1, 0, T - 1), tail}, 1);
}

}  // namespace

ForwardTrace CaSTFormer::forward(const DualStreamBatch& batch, const ForwardContext& ctx) const {
  if (!batch.interior.defined() || !batch.exterior.defined()) {
    throw ShapeError("forward: batch streams missing");
  }
  if (batch.interior.rank() != 3 || batch.exterior.rank() != 3 ||
      batch.interior.dim(0) != batch.exterior.dim(0) ||
      batch.interior.dim(1) != batch.exterior.dim(1)) {
    throw ShapeError("forward: interior " + shape_str(batch.interior.shape()) + " and exterior " +
                     shape_str(batch.exterior.shape()) + " must share (B,T)");
  }
  const std::size_t B = batch.interior.dim(0);
  const std::size_t T = batch.interior.dim(1);
  const std::size_t D = cfg_.encoder.d_model;

  ForwardTrace tr;
  tr.f_in = enc_in_.forward(batch.interior, ctx);
  tr.f_out = enc_out_.forward(batch.exterior, ctx);

  Tensor seq_in = tr.f_in, seq_out = tr.f_out;
  Tensor sum_in = select(seq_in, 1, T - 1), sum_out = select(seq_out, 1, T - 1);
  Tensor ctx_feat, z_intent;

  const auto& stages = cfg_.pipeline;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    switch (stages[i]) {
      case Stage::Rsf: {
        tr.rsf = rsf_.forward(seq_in, seq_out, ctx);
        seq_in = tr.rsf->x_in;
        seq_out = tr.rsf->x_out;
        sum_in = select(seq_in, 1, T - 1);
        sum_out = select(seq_out, 1, T - 1);
        break;
      }
      case Stage::Cpe: {
        const bool rsf_later =
            std::find(stages.begin() + static_cast<std::ptrdiff_t>(i) + 1, stages.end(),
                      Stage::Rsf) != stages.end();
        tr.cpe = cpe_.forward(seq_in, seq_out, ctx, rsf_later);
        sum_in = tr.cpe->h_in;
        sum_out = tr.cpe->h_out;
        z_intent = tr.cpe->z_intent;
        if (tr.cpe->seq_in.defined()) {
          seq_in = tr.cpe->seq_in;
          seq_out = tr.cpe->seq_out;
        } else {
          seq_in = replace_last(seq_in, sum_in);
          seq_out = replace_last(seq_out, sum_out);
        }
        break;
      }
      case Stage::Fsn: {
        const Tensor z = z_intent.defined() ? z_intent : Tensor::zeros({B, D});
        const Tensor speed = cfg_.fsn.use_speed ? batch.speed : Tensor{};
        auto r = fsn_.refine_branches(sum_in, sum_out, z, speed);
        sum_in = r.r_in;
        sum_out = r.r_out;
        ctx_feat = r.r_ctx;
        seq_in = replace_last(seq_in, sum_in);
        seq_out = replace_last(seq_out, sum_out);
        break;
      }
    }
  }

  tr.summary_in = sum_in;
  tr.summary_out = sum_out;
  if (cfg_.has(Stage::Fsn)) {
    tr.fsn = fsn_.fuse(sum_in, sum_out, ctx_feat);
    tr.joint_logits = tr.fsn->joint_logits;
  } else {
    tr.joint_logits = head_(concat({sum_in, sum_out}, 1));
  }
  return tr;
}

}  // namespace castformer
