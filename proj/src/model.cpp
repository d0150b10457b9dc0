#include "protossl/model.hpp"

#include "protossl/tensorio.hpp"

#include <nlohmann/json.hpp>

#include <cmath>

namespace protossl {

using nlohmann::json;

namespace {

Mat gaussian_mat(Index rows, Index cols, double std, Rng& rng) {
  Mat m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = std * rng.gaussian();
  return m;
}

}  // namespace

Encoder make_encoder(Index in, Index hidden, Index out, Rng rng) {
  if (in < 1 || hidden < 1 || out < 1) throw std::invalid_argument("encoder: bad dimensions");
  Encoder e;
  e.w1 = gaussian_mat(in, hidden, std::sqrt(2.0 / static_cast<double>(in)), rng);
  e.b1 = Mat::Zero(1, hidden);
  e.w2 = gaussian_mat(hidden, out, std::sqrt(2.0 / static_cast<double>(hidden)), rng);
  e.b2 = Mat::Zero(1, out);
  return e;
}

PrototypeBank make_bank(Index prototypes, Index dim, Rng rng) {
  if (prototypes < 1 || dim < 1) throw std::invalid_argument("bank: bad dimensions");
  PrototypeBank b;
  b.P = gaussian_mat(prototypes, dim, 1.0, rng);
  for (Index k = 0; k < prototypes; ++k) {
    const double n = b.P.row(k).norm();
    if (n > 0) b.P.row(k) /= n;
  }
  b.records.assign(static_cast<std::size_t>(prototypes), PrototypeRecord{});
  return b;
}

ProjectionHead make_head(Index prototypes, Rng rng) {
  if (prototypes < 2) throw std::invalid_argument("head: needs at least 2 prototypes");
  ProjectionHead h;
  const Index half = prototypes / 2;
  h.w1 = gaussian_mat(prototypes, prototypes, std::sqrt(2.0 / static_cast<double>(prototypes)), rng);
  h.b1 = Mat::Zero(1, prototypes);
  h.w2 = gaussian_mat(prototypes, half, std::sqrt(2.0 / static_cast<double>(prototypes)), rng);
  h.b2 = Mat::Zero(1, half);
  return h;
}

Model make_model(const ModelConfig& cfg, const WindowSpec& window, Index channels,
                 Index timesteps, const Rng& rng) {
  window.validate(timesteps);
  Model m;
  m.window = window;
  m.channels = channels;
  m.timesteps = timesteps;
  Rng enc_rng = rng.substream("encoder");
  Rng bank_rng = rng.substream("bank");
  Rng head_rng = rng.substream("head");
  m.enc = make_encoder(channels * window.width, cfg.hidden, cfg.emb_dim, enc_rng);
  m.bank = make_bank(cfg.prototypes, cfg.emb_dim, bank_rng);
  m.head = make_head(cfg.prototypes, head_rng);
  return m;
}

Mat encode(const Encoder& enc, const Eigen::Ref<const Mat>& rows) {
  if (rows.cols() != enc.w1.rows()) {
    throw std::invalid_argument("encode: input dim " + std::to_string(rows.cols()) +
                                " != encoder in_dim " + std::to_string(enc.w1.rows()));
  }
  Mat h = (rows * enc.w1).rowwise() + enc.b1.row(0);
  h = h.cwiseMax(0.0);
  return (h * enc.w2).rowwise() + enc.b2.row(0);
}

Mat patch_embed(const Model& m, const Eigen::Ref<const Vec>& sample) {
  return encode(m.enc, window_matrix(sample, m.channels, m.timesteps, m.window));
}

Mat all_windows(const Eigen::Ref<const Mat>& X, Index channels, Index timesteps,
                const WindowSpec& spec) {
  const Index wps = spec.count(timesteps);
  Mat out(X.rows() * wps, channels * spec.width);
  for (Index n = 0; n < X.rows(); ++n) {
    out.middleRows(n * wps, wps) = window_matrix(X.row(n), channels, timesteps, spec);
  }
  return out;
}

Mat cosine_matrix(const Eigen::Ref<const Mat>& a, const Eigen::Ref<const Mat>& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("cosine_matrix: dim mismatch " + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.cols()));
  }
  Vec na = a.rowwise().norm().cwiseMax(kEps);
  Vec nb = b.rowwise().norm().cwiseMax(kEps);
  Mat an = a.array().colwise() / na.array();
  Mat bn = b.array().colwise() / nb.array();
  Mat s = an * bn.transpose();
  s = s.cwiseMin(1.0).cwiseMax(-1.0);
  // Bit-equal rows must score exactly 1 (self-similarity of a projected
  // prototype against its source window); the product above can land 1 ulp low.
  for (Index r = 0; r < s.rows(); ++r) {
    for (Index c = 0; c < s.cols(); ++c) {
      if (s(r, c) > 1.0 - 1e-9 && s(r, c) != 1.0 && an.row(r) == bn.row(c)) {
        s(r, c) = 1.0;
      }
    }
  }
  return s;
}

Activations activations_vs(const Model& m, const Eigen::Ref<const Mat>& X,
                           const Eigen::Ref<const Mat>& P) {
  if (P.cols() != m.enc.out_dim()) {
    throw std::invalid_argument("activations: prototype dim " + std::to_string(P.cols()) +
                                " != encoder out_dim " + std::to_string(m.enc.out_dim()));
  }
  const Index wps = m.window.count(m.timesteps);
  // Embed per sample so rows are bit-identical to patch_embed (projection
  // stores these rows and later passes must reproduce them exactly; batched
  // GEMM would round differently).
  Mat emb(X.rows() * wps, m.enc.out_dim());
  for (Index n = 0; n < X.rows(); ++n) {
    emb.middleRows(n * wps, wps) = patch_embed(m, X.row(n));
  }
  Mat sims = cosine_matrix(emb, P);  // (N*wps) x K

  Activations act;
  act.A.resize(X.rows(), P.rows());
  act.argmax.resize(X.rows(), P.rows());
  for (Index n = 0; n < X.rows(); ++n) {
    for (Index k = 0; k < P.rows(); ++k) {
      Index best = 0;
      double bv = sims(n * wps, k);
      for (Index w = 1; w < wps; ++w) {
        const double v = sims(n * wps + w, k);
        if (v > bv) { bv = v; best = w; }
      }
      act.A(n, k) = bv;
      act.argmax(n, k) = best;
    }
  }
  return act;
}

Activations activations(const Model& m, const Eigen::Ref<const Mat>& X) {
  return activations_vs(m, X, m.bank.P);
}

Mat head_forward(const ProjectionHead& head, const Eigen::Ref<const Mat>& A) {
  if (A.cols() != head.w1.rows()) {
    throw std::invalid_argument("head_forward: input dim " + std::to_string(A.cols()) +
                                " != head in_dim " + std::to_string(head.w1.rows()));
  }
  Mat h = (A * head.w1).rowwise() + head.b1.row(0);
  h = h.cwiseMax(0.0);
  return (h * head.w2).rowwise() + head.b2.row(0);
}

EncoderLeaves encoder_leaves(const Encoder& enc, const std::string& prefix) {
  return {ad::leaf(enc.w1, prefix + ".w1"), ad::leaf(enc.b1, prefix + ".b1"),
          ad::leaf(enc.w2, prefix + ".w2"), ad::leaf(enc.b2, prefix + ".b2")};
}

HeadLeaves head_leaves(const ProjectionHead& head, const std::string& prefix) {
  return {ad::leaf(head.w1, prefix + ".w1"), ad::leaf(head.b1, prefix + ".b1"),
          ad::leaf(head.w2, prefix + ".w2"), ad::leaf(head.b2, prefix + ".b2")};
}

void write_back(Encoder& enc, const EncoderLeaves& l) {
  enc.w1 = l.w1->value;
  enc.b1 = l.b1->value;
  enc.w2 = l.w2->value;
  enc.b2 = l.b2->value;
}

void write_back(ProjectionHead& head, const HeadLeaves& l) {
  head.w1 = l.w1->value;
  head.b1 = l.b1->value;
  head.w2 = l.w2->value;
  head.b2 = l.b2->value;
}

ad::NodePtr graph_encode(const EncoderLeaves& l, const Mat& rows) {
  auto x = ad::constant(rows);
  auto h = ad::relu(ad::add_rowvec(ad::matmul(x, l.w1), l.b1));
  return ad::add_rowvec(ad::matmul(h, l.w2), l.b2);
}

ad::NodePtr graph_activations(const EncoderLeaves& enc, const ad::NodePtr& bank,
                              const Mat& window_rows, Index windows_per_sample) {
  auto emb = graph_encode(enc, window_rows);
  auto sims = ad::cosine_sim_matrix(emb, bank);
  return ad::rowblock_max(sims, windows_per_sample);
}

ad::NodePtr graph_head(const HeadLeaves& head, const ad::NodePtr& acts) {
  auto h = ad::relu(ad::add_rowvec(ad::matmul(acts, head.w1), head.b1));
  return ad::add_rowvec(ad::matmul(h, head.w2), head.b2);
}

void save_model(const Model& m, const std::filesystem::path& dir, const json& extra) {
  TensorWriter w;
  w.add("enc.w1", m.enc.w1);
  w.add("enc.b1", m.enc.b1);
  w.add("enc.w2", m.enc.w2);
  w.add("enc.b2", m.enc.b2);
  w.add("bank.P", m.bank.P);
  w.add("head.w1", m.head.w1);
  w.add("head.b1", m.head.b1);
  w.add("head.w2", m.head.w2);
  w.add("head.b2", m.head.b2);

  json meta;
  meta["channels"] = m.channels;
  meta["timesteps"] = m.timesteps;
  meta["window"] = {{"width", m.window.width}, {"stride", m.window.stride}};
  json prov = json::array();
  for (const auto& r : m.bank.records) {
    prov.push_back({{"label", r.label}, {"slot", r.slot}, {"sample", r.sample},
                    {"window", r.window}});
  }
  meta["provenance"] = std::move(prov);
  meta["extra"] = extra;
  w.set_extra(std::move(meta));
  w.save(dir);
}

Model load_model(const std::filesystem::path& dir) {
  auto td = TensorDir::load(dir);
  Model m;
  m.enc.w1 = td.matrix("enc.w1");
  m.enc.b1 = td.matrix("enc.b1");
  m.enc.w2 = td.matrix("enc.w2");
  m.enc.b2 = td.matrix("enc.b2");
  m.bank.P = td.matrix("bank.P");
  m.head.w1 = td.matrix("head.w1");
  m.head.b1 = td.matrix("head.b1");
  m.head.w2 = td.matrix("head.w2");
  m.head.b2 = td.matrix("head.b2");
  const auto& meta = td.extra();
  m.channels = meta.at("channels").get<Index>();
  m.timesteps = meta.at("timesteps").get<Index>();
  m.window.width = meta.at("window").at("width").get<Index>();
  m.window.stride = meta.at("window").at("stride").get<Index>();
  for (const auto& r : meta.at("provenance")) {
    PrototypeRecord rec;
    rec.label = r.at("label").get<int>();
    rec.slot = r.at("slot").get<int>();
    rec.sample = r.at("sample").get<std::int64_t>();
    rec.window = r.at("window").get<std::int64_t>();
    m.bank.records.push_back(rec);
  }
  return m;
}

}  // namespace protossl
