#include <doctest.h>

#include "quartf/perturb/perturb.hpp"
#include "quartf/streams/dataset.hpp"

#include <cstring>

using namespace quartf;
using namespace quartf::perturb;
using namespace quartf::streams;

namespace {

StreamConfig tiny_config() {
  StreamConfig c;
  c.video = {8, 6, 2, 8.0};
  c.audio = {6, 5, 2, 16.0};
  c.sensor = {4, 4, 1, 50.0};
  return c;
}

std::vector<MultimodalSample> make_pool(Index n, std::uint64_t seed) {
  auto ds = gen_dataset(tiny_config(), seed, n, {kScenarios.begin(), kScenarios.end()});
  return std::move(ds.samples);
}

bool streams_equal(const MultimodalSample& a, const MultimodalSample& b) {
  for (Modality m : kModalities) {
    const auto& fa = a.stream(m).frames;
    const auto& fb = b.stream(m).frames;
    if (fa.rows() != fb.rows() || fa.cols() != fb.cols()) return false;
    if (std::memcmp(fa.data(), fb.data(), sizeof(double) * static_cast<size_t>(fa.size())) != 0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("add_noise matches the requested scale and respects zero variance") {
  RawStream s;
  s.modality = Modality::audio;
  Rng rng(5);
  s.frames.resize(10000, 2);
  for (Index i = 0; i < 10000; ++i) {
    s.frames(i, 0) = rng.normal() * 2.0;  // std ~2
    s.frames(i, 1) = rng.normal() * 0.5;  // std ~0.5
  }
  const double sigma_rel = 0.8;
  auto out = add_noise(s, sigma_rel, 99);
  for (Index j = 0; j < 2; ++j) {
    Eigen::VectorXd diff = out.frames.col(j) - s.frames.col(j);
    const double mean = diff.mean();
    const double std = std::sqrt((diff.array() - mean).square().mean());
    const double base = std::sqrt((s.frames.col(j).array() - s.frames.col(j).mean()).square().mean());
    CHECK(std == doctest::Approx(sigma_rel * base).epsilon(0.05));
  }

  // sigma_rel -> 0+ limit: output approaches input.
  auto nearly = add_noise(s, 1e-12, 99);
  CHECK((nearly.frames - s.frames).cwiseAbs().maxCoeff() < 1e-9);

  // Constant stream has zero per-channel std and is left unchanged.
  RawStream zero;
  zero.modality = Modality::sensor;
  zero.frames = Matrix<double>::Zero(16, 4);
  auto unchanged = add_jitter(zero, 1.0, 7);
  CHECK((unchanged.frames.array() == 0.0).all());
}

TEST_CASE("reverse is an involution") {
  RawStream s;
  s.modality = Modality::video;
  s.frames.resize(3, 1);
  s.frames << 1, 2, 3;
  auto r = reverse(s);
  CHECK(r.frames(0, 0) == 3.0);
  CHECK(r.frames(1, 0) == 2.0);
  CHECK(r.frames(2, 0) == 1.0);
  auto rr = reverse(r);
  CHECK(std::memcmp(rr.frames.data(), s.frames.data(), sizeof(double) * 3) == 0);

  RawStream pal;
  pal.modality = Modality::video;
  pal.frames.resize(3, 1);
  pal.frames << 4, 9, 4;
  CHECK(std::memcmp(reverse(pal).frames.data(), pal.frames.data(), sizeof(double) * 3) == 0);
}

TEST_CASE("replacement excludes self and is uniform over the others") {
  auto two = make_pool(2, 11);
  auto [r0, src0] = replace_with_irrelevant(two[0].video, two, two[0].sample_id, 1);
  CHECK(src0 == two[1].sample_id);  // only choice

  auto pool = make_pool(10, 13);
  std::array<int, 10> counts{};
  for (int i = 0; i < 10000; ++i) {
    auto [stream, src] =
        replace_with_irrelevant(pool[0].audio, pool, pool[0].sample_id, derive_seed(17, "draw", i));
    CHECK(src != pool[0].sample_id);
    ++counts[static_cast<size_t>(src)];
  }
  CHECK(counts[0] == 0);
  // Chi-square over the 9 admissible partners, df=8; p > 0.01 needs < 20.09.
  double chi2 = 0;
  const double expected = 10000.0 / 9.0;
  for (size_t k = 1; k < 10; ++k) chi2 += (counts[k] - expected) * (counts[k] - expected) / expected;
  CHECK(chi2 < 20.09);

  std::vector<MultimodalSample> singleton(pool.begin(), pool.begin() + 1);
  CHECK_THROWS_AS(replace_with_irrelevant(pool[0].audio, singleton, pool[0].sample_id, 1), InputError);
}

TEST_CASE("generate_mismatch is deterministic, label-safe and shape-preserving") {
  auto pool = make_pool(8, 21);
  PerturbationSpec spec;
  spec.seed = 333;
  auto [p1, r1] = generate_mismatch(pool[3], spec, pool);
  auto [p2, r2] = generate_mismatch(pool[3], spec, pool);
  CHECK(streams_equal(p1, p2));
  for (Modality m : kModalities) {
    CHECK(r1.record(m).coin == r2.record(m).coin);
    CHECK(r1.record(m).op == r2.record(m).op);
    CHECK(p1.stream(m).frames.rows() == pool[3].stream(m).frames.rows());
    CHECK(p1.stream(m).frames.cols() == pool[3].stream(m).frames.cols());
  }
  CHECK(p1.relevant == pool[3].relevant);
  CHECK(p1.answer_tokens == pool[3].answer_tokens);
  CHECK(p1.answer_class == pool[3].answer_class);
}

TEST_CASE("algorithm fidelity: branch structure, rates, and all-false identity") {
  auto pool = make_pool(16, 31);
  const int n = 100000;
  std::array<int, 3> applied{};  // audio, video, sensor order below
  int any_applied = 0;
  bool found_all_false = false;

  for (int i = 0; i < n; ++i) {
    PerturbationSpec spec;
    spec.seed = derive_seed(1001, "call", static_cast<std::uint64_t>(i));
    const auto& sample = pool[static_cast<size_t>(i) % pool.size()];
    auto [perturbed, rec] = generate_mismatch(sample, spec, pool);

    bool any = false;
    for (Modality m : {Modality::audio, Modality::video, Modality::sensor}) {
      const auto& r = rec.record(m);
      if (!r.coin) {
        // else-branch: untouched and recorded as NoPerturbation.
        CHECK(r.op == Op::no_perturbation);
      } else {
        const auto& ops = spec.ops(m);
        CHECK(std::find(ops.begin(), ops.end(), r.op) != ops.end());
      }
      const bool did = r.coin && r.op != Op::no_perturbation;
      any = any || did;
      if (did) ++applied[m == Modality::audio ? 0 : m == Modality::video ? 1 : 2];
    }
    if (any) ++any_applied;

    if (!found_all_false && !rec.record(Modality::audio).coin && !rec.record(Modality::video).coin &&
        !rec.record(Modality::sensor).coin) {
      found_all_false = true;
      CHECK(streams_equal(perturbed, sample));  // bit-exact pass-through
    }
  }
  CHECK(found_all_false);

  // Effective rates: audio/video 1/2 * 3/4 = 3/8, sensor 1/2 * 2/3 = 1/3,
  // any-modality 1 - (5/8)^2 * (2/3) ~ 0.7396; all within +-1% absolute.
  CHECK(std::abs(double(applied[0]) / n - 3.0 / 8.0) < 0.01);
  CHECK(std::abs(double(applied[1]) / n - 3.0 / 8.0) < 0.01);
  CHECK(std::abs(double(applied[2]) / n - 1.0 / 3.0) < 0.01);
  CHECK(std::abs(double(any_applied) / n - 0.7396) < 0.01);
}

TEST_CASE("spec validation rejects malformed op sets") {
  PerturbationSpec bad;
  bad.sensor_ops = {Op::add_noise};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  PerturbationSpec neg;
  neg.sigma_rel = -1.0;
  CHECK_THROWS_AS(neg.validate(), ConfigError);
}

TEST_CASE("dataset round trip: manifests, blobs, determinism, perturbed copies") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "quartf_test_ds";
  const fs::path dir2 = fs::temp_directory_path() / "quartf_test_ds2";
  fs::remove_all(dir);
  fs::remove_all(dir2);

  auto cfg = tiny_config();
  auto ds = gen_dataset(cfg, 4242, 12, {kScenarios.begin(), kScenarios.end()});
  save_dataset(dir, ds);
  auto loaded = load_dataset(dir);
  CHECK(loaded.meta.id == ds.meta.id);
  REQUIRE(loaded.samples.size() == ds.samples.size());
  for (size_t i = 0; i < ds.samples.size(); ++i) CHECK(streams_equal(loaded.samples[i], ds.samples[i]));

  // Blob cache matches regeneration bit-exactly.
  std::ifstream blob(dir / "video.qtns", std::ios::binary);
  auto first = read_blob<double>(blob);
  CHECK(std::memcmp(first.value().data(), ds.samples[0].video.frames.data(),
                    sizeof(double) * static_cast<size_t>(first.value().size())) == 0);

  // Same seed -> identical manifest bytes.
  auto ds2 = gen_dataset(cfg, 4242, 12, {kScenarios.begin(), kScenarios.end()});
  save_dataset(dir2, ds2);
  CHECK(manifest_hash(dir) == manifest_hash(dir2));

  // Perturbed copy loads its streams from the blobs.
  PerturbationSpec spec;
  spec.seed = 77;
  Dataset pds = ds;
  pds.meta.perturbed = true;
  pds.meta.id += "-perturbed";
  std::vector<PerturbationRecord> records;
  for (auto& s : pds.samples) {
    auto [p, rec] = generate_mismatch(s, spec, ds.samples);
    s = std::move(p);
    records.push_back(std::move(rec));
  }
  const fs::path pdir = fs::temp_directory_path() / "quartf_test_ds_p";
  fs::remove_all(pdir);
  save_dataset(pdir, pds, &records);
  auto ploaded = load_dataset(pdir);
  bool any_diff = false;
  for (size_t i = 0; i < pds.samples.size(); ++i) {
    CHECK(streams_equal(ploaded.samples[i], pds.samples[i]));
    any_diff = any_diff || !streams_equal(ploaded.samples[i], ds.samples[i]);
  }
  CHECK(any_diff);  // the perturbation actually changed something
  CHECK(fs::exists(pdir / "records.jsonl"));

  fs::remove_all(dir);
  fs::remove_all(dir2);
  fs::remove_all(pdir);
}
