#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>
#include <fstream>

#include "gradcheck.hpp"
#include "protgo/checkpoint.hpp"
#include "protgo/model.hpp"

using namespace protgo;
using protgo::testing::max_relative_error;
using protgo::testing::numeric_gradient;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.num_layers = 2;
  c.d_model = 8;
  c.num_heads = 2;
  c.d_ff = 16;
  c.max_len = 16;
  c.num_labels = 5;
  c.dropout = 0.0;
  return c;
}

// Every array drawn at random, heads and layer norms included.
void randomize(Model& m, std::uint64_t seed, double spread = 0.5) {
  Rng rng(seed);
  for (auto& p : m.parameters()) {
    for (double& v : p.tensor.data()) v = rng.normal(0.0, spread);
  }
}

TokenSequence ids(std::vector<std::int32_t> v) { return {std::move(v), 0}; }

std::vector<double> values_of(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Plain-loop layer norm with unit gamma and zero beta.
std::vector<double> ref_layer_norm(const std::vector<double>& x, std::size_t rows, std::size_t d) {
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += x[r * d + c];
    mean /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) var += (x[r * d + c] - mean) * (x[r * d + c] - mean);
    var /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = (x[r * d + c] - mean) / std::sqrt(var + kLayerNormEps);
  }
  return out;
}

EncoderLayerParams zero_layer(std::size_t d, std::size_t heads, std::size_t d_ff) {
  EncoderLayerParams p;
  const std::size_t dh = d / heads;
  for (std::size_t h = 0; h < heads; ++h) {
    p.q_weight.emplace_back(Shape{d, dh}, 0.0);
    p.k_weight.emplace_back(Shape{d, dh}, 0.0);
    p.v_weight.emplace_back(Shape{d, dh}, 0.0);
    p.q_bias.emplace_back(Shape{dh}, 0.0);
    p.k_bias.emplace_back(Shape{dh}, 0.0);
    p.v_bias.emplace_back(Shape{dh}, 0.0);
  }
  p.out_weight = Tensor({d, d}, 0.0);
  p.out_bias = Tensor({d}, 0.0);
  p.ln1_gamma = Tensor({d}, 1.0);
  p.ln1_beta = Tensor({d}, 0.0);
  p.ff1_weight = Tensor({d, d_ff}, 0.0);
  p.ff1_bias = Tensor({d_ff}, 0.0);
  p.ff2_weight = Tensor({d_ff, d}, 0.0);
  p.ff2_bias = Tensor({d}, 0.0);
  p.ln2_gamma = Tensor({d}, 1.0);
  p.ln2_beta = Tensor({d}, 0.0);
  return p;
}

}  // namespace

TEST(ModelConfig, ValidatesAndRoundTrips) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  c.num_heads = 3;
  EXPECT_THROW(c.validate(), Error);
  c = tiny_config();
  const nlohmann::json j = c;
  EXPECT_EQ(j.get<ModelConfig>(), c);
  nlohmann::json bad = j;
  bad["hidden"] = 3;
  EXPECT_THROW(bad.get<ModelConfig>(), Error);
}

TEST(ModelConfig, PaperScaleLayoutIsAccepted) {
  ModelConfig c;
  c.num_layers = 30;
  c.d_model = 1024;
  c.num_heads = 16;
  c.d_ff = 4096;
  EXPECT_NO_THROW(c.validate());
  std::size_t total = 0;
  for (const auto& s : parameter_layout(c)) total += shape_numel(s.shape);
  EXPECT_GT(total, 300'000'000u);
}

TEST(Embed, ZeroTablesGiveZero) {
  Model m(tiny_config(), 1);
  for (const char* t : {"token_embedding", "positional_embedding", "segment_embedding"}) {
    for (double& v : m.parameter(t).data()) v = 0.0;
  }
  Tape tape;
  const auto e = m.embed(tape, tokenize("MKV", 16));
  for (double v : e.data()) EXPECT_EQ(v, 0.0);
}

TEST(Embed, SumOfThreeLookups) {
  Model m(tiny_config(), 2);
  Tape tape;
  const auto tok = tokenize("MKV", 16);
  const auto e = m.embed(tape, tok);
  const auto& te = m.parameter("token_embedding");
  const auto& pe = m.parameter("positional_embedding");
  const auto& se = m.parameter("segment_embedding");
  for (std::size_t i = 0; i < tok.size(); ++i) {
    for (std::size_t c = 0; c < 8; ++c) {
      const double want = te.at(static_cast<std::size_t>(tok.ids[i]), c) + pe.at(i, c) + se.at(0, c);
      EXPECT_EQ(e.at(i, c), want);
    }
  }
}

TEST(Embed, SegmentRowOneIsDormant) {
  Model m(tiny_config(), 3);
  Tape tape;
  const auto before = values_of(m.embed(tape, tokenize("MKVLA", 16)));
  for (std::size_t c = 0; c < 8; ++c) m.parameter("segment_embedding").at(1, c) = 100.0;
  EXPECT_EQ(values_of(m.embed(tape, tokenize("MKVLA", 16))), before);
}

TEST(Embed, LocalityOfLookup) {
  Model m(tiny_config(), 4);
  Tape tape;
  const auto a = m.embed(tape, tokenize("MKVLA", 16));
  const auto b = m.embed(tape, tokenize("MKWLA", 16));
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    bool differs = false;
    for (std::size_t c = 0; c < 8; ++c) differs |= a.at(i, c) != b.at(i, c);
    EXPECT_EQ(differs, i == 3) << "row " << i;
  }
}

TEST(Embed, RejectsTooManyPositions) {
  Model m(tiny_config(), 5);
  Tape tape;
  TokenSequence t;
  t.ids.assign(19, token::kFirstResidue);
  EXPECT_THROW(m.embed(tape, t), Error);
  t.ids.resize(18);
  EXPECT_NO_THROW(m.embed(tape, t));
  t.ids[0] = 30;
  EXPECT_THROW(m.embed(tape, t), Error);
}

TEST(EncoderLayer, EqualScoresGiveUniformAttentionOverRealTokens) {
  const std::size_t d = 4, len = 5;
  auto p = zero_layer(d, 1, 3);
  // V and the output projection are identities, so attention output = weighted mean of x.
  for (std::size_t i = 0; i < d; ++i) {
    p.v_weight[0].at(i, i) = 1.0;
    p.out_weight.at(i, i) = 1.0;
  }
  Rng rng(9);
  const auto x = protgo::testing::random_tensor(rng, {len, d}, -1.0, 1.0, false);
  Tensor pad({len}, 1.0);
  pad[3] = pad[4] = 0.0;
  Tape tape;
  const auto out = encoder_layer(tape, x, p, pad);

  std::vector<double> mean(d, 0.0);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < d; ++c) mean[c] += x.at(r, c) / 3.0;
  }
  std::vector<double> h(len * d);
  for (std::size_t r = 0; r < len; ++r) {
    for (std::size_t c = 0; c < d; ++c) h[r * d + c] = x.at(r, c) + mean[c];
  }
  const auto want = ref_layer_norm(ref_layer_norm(h, len, d), len, d);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(out[i], want[i], 1e-12);
}

TEST(EncoderLayer, ZeroWeightsKeepResidualPath) {
  const std::size_t d = 6, len = 4;
  const auto p = zero_layer(d, 2, 5);
  Rng rng(10);
  const auto x = protgo::testing::random_tensor(rng, {len, d}, -2.0, 2.0, false);
  Tape tape;
  const auto out = encoder_layer(tape, x, p, Tensor({len}, 1.0));
  const auto want = ref_layer_norm(ref_layer_norm(values_of(x), len, d), len, d);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(out[i], want[i], 1e-12);
}

TEST(EncoderLayer, PadTokenIdDoesNotLeakIntoRealRows) {
  Model m(tiny_config(), 11);
  randomize(m, 12);
  auto a = tokenize("MKVLA", 16);
  a.ids.insert(a.ids.end(), {token::kPad, token::kPad});
  Tape tape;
  const auto base = m.encode(tape, a);
  // A pad row keeps its mask bit off, whatever embedding it carries.
  Tensor pad_mask = padding_mask(a);
  Tensor x = m.embed(tape, a);
  for (std::size_t c = 0; c < 8; ++c) x.at(7, c) += 3.0;
  for (std::size_t l = 0; l < 2; ++l) x = encoder_layer(tape, x, m.layer(l), pad_mask);
  for (std::size_t r = 0; r < 7; ++r) {
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(x.at(r, c), base.at(r, c)) << r;
  }
}

TEST(Classify, ZeroWeightsGiveBias) {
  Model m(tiny_config(), 13);
  randomize(m, 14);
  for (double& v : m.parameter("classifier.weight").data()) v = 0.0;
  const auto& b = m.parameter("classifier.bias");
  Tape tape;
  for (const char* s : {"MKV", "ACDEFGHIKL"}) {
    const auto logits = m.forward_classify(tape, tokenize(s, 16));
    EXPECT_EQ(values_of(logits), values_of(b));
  }
}

TEST(Classify, InvariantToPadEmbeddingAndPadTail) {
  Model m(tiny_config(), 15);
  randomize(m, 16);
  auto t = tokenize("MKVLAG", 16);
  Tape tape;
  const auto plain = values_of(m.forward_classify(tape, t));
  t.ids.insert(t.ids.end(), 4, token::kPad);
  const auto padded = values_of(m.forward_classify(tape, t));
  for (std::size_t c = 0; c < 8; ++c) m.parameter("token_embedding").at(token::kPad, c) = 7.0 * static_cast<double>(c);
  const auto poked = values_of(m.forward_classify(tape, t));
  EXPECT_EQ(padded, poked);
  ASSERT_EQ(plain.size(), padded.size());
  for (std::size_t i = 0; i < plain.size(); ++i) EXPECT_EQ(plain[i], padded[i]);
}

TEST(Classify, ThousandResiduesUnderOneSecond) {
  ModelConfig c;
  c.num_labels = 100;
  Model m(c, 17);
  randomize(m, 18, 0.02);
  Rng rng(19);
  std::string seq;
  for (int i = 0; i < 1000; ++i) seq.push_back("ACDEFGHIKLMNPQRSTVWY"[rng.below(20)]);
  Tape tape;
  tape.set_recording(false);
  const auto start = std::chrono::steady_clock::now();
  const auto logits = m.forward_classify(tape, tokenize(seq, 1000));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  for (double v : logits.data()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_LT(secs, 1.0);
}

TEST(Mlm, RequiresMask) {
  Model m(tiny_config(), 20);
  Tape tape;
  EXPECT_THROW(m.forward_mlm(tape, tokenize("MKV", 16)), Error);
}

TEST(Mlm, FreshModelIsExactlyUniform) {
  Model m(tiny_config(), 21);
  auto t = tokenize("MKVLA", 16);
  t.ids[2] = token::kMask;
  Tape tape;
  const auto logits = m.forward_mlm(tape, t);
  EXPECT_EQ(logits.shape(), (Shape{7, 30}));
  for (double v : logits.data()) EXPECT_EQ(v, 0.0);
}

// Mean softmax entropy with every array, the MLM head included, drawn at init scale.
TEST(Mlm, RandomInitEntropyNearLog30) {
  const double ln30 = std::log(30.0);
  ModelConfig c;
  c.max_len = 64;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Model m(c, seed);
    Rng rng(derive_seed(seed, 1));
    for (double& v : m.parameter("mlm_head.weight").data()) v = rng.normal(0.0, 0.02);
    auto t = tokenize("MKVLAGHSTRWYPQNDE", 64);
    t.ids[1 + seed % 17] = token::kMask;
    Tape tape;
    tape.set_recording(false);
    const auto lp = log_softmax(tape, m.forward_mlm(tape, t), 1);
    double entropy = 0.0;
    for (std::size_t r = 0; r < lp.dim(0); ++r) {
      for (std::size_t v = 0; v < 30; ++v) entropy -= std::exp(lp.at(r, v)) * lp.at(r, v);
    }
    entropy /= static_cast<double>(lp.dim(0));
    worst = std::max(worst, std::abs(entropy - ln30) / ln30);
  }
  EXPECT_LT(worst, 0.10);
}

TEST(Model, CopiedWeightsGiveIdenticalLogits) {
  Model a(tiny_config(), 22);
  randomize(a, 23);
  Model b(tiny_config(), 99);
  b.copy_weights_from(a);
  auto t = tokenize("MKVLAG", 16);
  t.ids[3] = token::kMask;
  Tape tape;
  EXPECT_EQ(values_of(a.forward_mlm(tape, t)), values_of(b.forward_mlm(tape, t)));
  EXPECT_EQ(values_of(a.forward_classify(tape, t)), values_of(b.forward_classify(tape, t)));
  const Model c = a;
  EXPECT_FALSE(c.parameter("classifier.weight").same_storage(a.parameter("classifier.weight")));
}

TEST(Model, SameSeedSameInit) {
  const Model a(tiny_config(), 5), b(tiny_config(), 5), c(tiny_config(), 6);
  EXPECT_EQ(values_of(a.parameter("layer_1.ffn.fc1.weight")), values_of(b.parameter("layer_1.ffn.fc1.weight")));
  EXPECT_NE(values_of(a.parameter("layer_1.ffn.fc1.weight")), values_of(c.parameter("layer_1.ffn.fc1.weight")));
}

TEST(Freeze, DefaultMaskShape) {
  ModelConfig c;
  c.num_layers = 5;
  const auto m = FreezeMask::default_finetune(c);
  for (const char* g : {"token_embedding", "positional_embedding", "segment_embedding", "layer_0", "layer_1"}) {
    EXPECT_TRUE(m.is_frozen(g)) << g;
  }
  for (const char* g : {"layer_2", "layer_3", "layer_4", "classifier"}) EXPECT_FALSE(m.is_frozen(g)) << g;
}

TEST(Freeze, OnlyUnfrozenGroupsReceiveGradients) {
  Model m(tiny_config(), 24);
  randomize(m, 25);
  m.apply_freeze(FreezeMask::all_but_classifier(m.config()), TrainPhase::Finetune);
  Tape tape;
  const auto loss = sum(tape, m.forward_classify(tape, tokenize("MKVLA", 16)));
  tape.backward(loss);
  for (const auto& p : m.parameters()) EXPECT_EQ(p.tensor.has_grad(), p.group == "classifier") << p.name;
}

TEST(Freeze, Errors) {
  Model m(tiny_config(), 26);
  auto mask = FreezeMask::none(m.config());
  mask.frozen["classifier"] = true;
  EXPECT_THROW(m.apply_freeze(mask, TrainPhase::Finetune), Error);
  EXPECT_NO_THROW(m.apply_freeze(mask, TrainPhase::Pretrain));
  auto extra = FreezeMask::none(m.config());
  extra.frozen["layer_7"] = true;
  EXPECT_THROW(m.apply_freeze(extra, TrainPhase::Pretrain), Error);
  auto missing = FreezeMask::none(m.config());
  missing.frozen.erase("pooler");
  EXPECT_THROW(m.apply_freeze(missing, TrainPhase::Pretrain), Error);
}

// Analytic gradients of every array against central differences, through both heads.
TEST(ModelGradient, EndToEndMatchesFiniteDifferences) {
  Model m(tiny_config(), 27);
  randomize(m, 28, 0.4);
  TokenSequence t = ids({token::kCls, 7, token::kMask, 12, 9, token::kSep});
  Rng rng(29);
  const auto w_cls = protgo::testing::random_tensor(rng, {5}, -1.0, 1.0, false);
  const auto w_mlm = protgo::testing::random_tensor(rng, {6, 30}, -1.0, 1.0, false);
  const auto forward = [&](Tape& tape) {
    const auto a = sum(tape, mul(tape, m.forward_classify(tape, t), w_cls));
    const auto b = sum(tape, mul(tape, m.forward_mlm(tape, t), w_mlm));
    return add(tape, a, b);
  };
  m.zero_grad();
  Tape tape;
  tape.backward(forward(tape));
  const auto plain = [&] {
    Tape off;
    off.set_recording(false);
    return forward(off).item();
  };
  // Key biases shift every score in a row equally, so their true gradient is
  // zero and the difference quotient is pure rounding noise; the 1e-6 floor
  // absorbs that.
  for (auto& p : m.parameters()) {
    const auto numeric = numeric_gradient(plain, p.tensor);
    EXPECT_LT(max_relative_error(p.tensor.grad(), numeric, 1e-6), 1e-3) << p.name;
    if (p.name.find(".attn.k.") != std::string::npos && p.name.ends_with(".bias")) {
      for (double g : p.tensor.grad()) EXPECT_NEAR(g, 0.0, 1e-12) << p.name;
    }
  }
}

// ---------------------------------------------------------------------------

namespace {

std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "protgo_test_model";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  Model m(tiny_config(), 30);
  randomize(m, 31);
  m.apply_freeze(FreezeMask::default_finetune(m.config()), TrainPhase::Finetune);
  auto ck = snapshot(m);
  ck.rng_state = Rng(5).state();
  ck.progress = {3, 17};
  ck.metadata["aspect"] = "MF";
  OptimizerState opt;
  opt.step = 17;
  opt.first_moment["classifier.bias"] = {0.1, -0.2, 0.3, 1e-300, -0.0};
  opt.second_moment["classifier.bias"] = {1, 2, 3, 4, 5};
  ck.optimizer = opt;
  const auto path = temp_path("rt.ckpt");
  save_checkpoint(ck, path);
  EXPECT_FALSE(std::filesystem::exists(path.string() + ".tmp"));

  const auto back = load_checkpoint(path);
  EXPECT_EQ(back.config, m.config());
  EXPECT_EQ(back.freeze_mask, m.freeze_mask());
  EXPECT_EQ(back.rng_state, ck.rng_state);
  EXPECT_EQ(back.progress.epochs_completed, 3u);
  EXPECT_EQ(back.progress.global_step, 17u);
  EXPECT_EQ(back.metadata["aspect"], "MF");
  ASSERT_TRUE(back.optimizer);
  EXPECT_EQ(*back.optimizer, opt);
  ASSERT_EQ(back.arrays.size(), ck.arrays.size());
  for (std::size_t i = 0; i < ck.arrays.size(); ++i) {
    EXPECT_EQ(back.arrays[i].name, ck.arrays[i].name);
    EXPECT_EQ(back.arrays[i].shape, ck.arrays[i].shape);
    EXPECT_EQ(std::memcmp(back.arrays[i].data.data(), ck.arrays[i].data.data(), ck.arrays[i].data.size() * 8), 0);
  }
  const auto m2 = model_from_checkpoint(back);
  Tape tape;
  EXPECT_EQ(values_of(m2.forward_classify(tape, tokenize("MKV", 16))),
            values_of(m.forward_classify(tape, tokenize("MKV", 16))));
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(ck));
}

TEST(Checkpoint, LayoutStartsWithMagicAndHeader) {
  const auto bytes = encode_checkpoint(snapshot(Model(tiny_config(), 1)));
  EXPECT_EQ(bytes.substr(0, 4), "PGO1");
  const auto header_len = detail::get_u64(bytes.data() + 4);
  const auto header = nlohmann::json::parse(bytes.substr(12, header_len));
  EXPECT_EQ(header["arrays"][0]["name"], "token_embedding");
  EXPECT_EQ(header["arrays"][0]["offset"], 0);
  EXPECT_EQ(header["arrays"][0]["dtype"], "f64");
  EXPECT_EQ(bytes.size(), 12 + header_len + header["payload_bytes"].get<std::size_t>());
}

TEST(Checkpoint, TruncatedByOneByte) {
  const auto path = temp_path("trunc.ckpt");
  save_checkpoint(snapshot(Model(tiny_config(), 32)), path);
  auto bytes = read_bytes(path);
  bytes.pop_back();
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes;
  }
  try {
    load_checkpoint(path);
    FAIL() << "expected truncation";
  } catch (const CheckpointTruncatedError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated checkpoint"), std::string::npos);
  }
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, 7)), CheckpointTruncatedError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, 40)), CheckpointTruncatedError);
}

TEST(Checkpoint, ShapeMismatchNamesArray) {
  ModelConfig wide = tiny_config();
  wide.d_model = 64;
  wide.num_heads = 4;
  const auto ck = snapshot(Model(wide, 33));
  ModelConfig narrow = wide;
  narrow.d_model = 32;
  Model target(narrow, 0);
  try {
    restore(target, ck);
    FAIL() << "expected shape error";
  } catch (const CheckpointShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("'token_embedding'"), std::string::npos) << e.what();
  }

  // A header whose config disagrees with its own arrays.
  auto lying = ck;
  lying.config = narrow;
  EXPECT_THROW(decode_checkpoint(encode_checkpoint(lying)), CheckpointShapeError);
}

TEST(Checkpoint, VersionAndMagicErrorsAreDistinct) {
  auto ck = snapshot(Model(tiny_config(), 34));
  ck.format_version = 2;
  EXPECT_THROW(decode_checkpoint(encode_checkpoint(ck)), CheckpointVersionError);
  ck.format_version = kCheckpointVersion;
  auto bytes = encode_checkpoint(ck);
  bytes[0] = 'X';
  try {
    decode_checkpoint(bytes);
    FAIL();
  } catch (const CheckpointVersionError&) {
    FAIL() << "bad magic reported as version error";
  } catch (const CheckpointTruncatedError&) {
    FAIL() << "bad magic reported as truncation";
  } catch (const CheckpointError&) {
  }
  EXPECT_THROW(load_checkpoint(temp_path("absent.ckpt")), IoError);
}
