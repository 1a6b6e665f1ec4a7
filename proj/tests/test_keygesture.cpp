#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "lglab/errors.hpp"
#include "lglab/keygesture.hpp"
#include "lglab/rng.hpp"
#include "lglab/synthface.hpp"

using namespace lglab;
using namespace lglab::keygesture;

namespace {

Image random_patch(int w, int h, std::uint64_t seed) {
  Image p(w, h);
  Rng rng(seed);
  for (double& v : p.pixels) v = rng.uniform();
  return p;
}

Image expression(synth::Attribute attr, double value) {
  synth::FactorVector f;
  f.identity_seed = 17;
  f.set(attr, value);
  return synth::render_sprite(f).pixels;
}

const Box kFace{7, 8, 18, 20};

}  // namespace

TEST_CASE("ncc identities") {
  const Image p = random_patch(9, 7, 1);
  CHECK(std::abs(ncc(p, p) - 1.0) < 1e-12);

  Image affine = p;
  for (double& v : affine.pixels) v = 0.5 + 0.3 * v;
  CHECK(ncc(p, affine) == doctest::Approx(1.0).epsilon(1e-12));

  Image neg = p;
  for (double& v : neg.pixels) v = -v + 2.0;
  CHECK(ncc(p, neg) == doctest::Approx(-1.0).epsilon(1e-12));

  const Image q = random_patch(9, 7, 2);
  CHECK(ncc(p, q) == ncc(q, p));
  CHECK(ncc(p, q) >= -1.0);
  CHECK(ncc(p, q) <= 1.0);
}

TEST_CASE("ncc matches a direct evaluation") {
  const Image a = random_patch(6, 5, 3), b = random_patch(6, 5, 4);
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a.pixels[i];
    mb += b.pixels[i];
  }
  ma /= a.size();
  mb /= b.size();
  long double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a.pixels[i] - ma) * (b.pixels[i] - mb);
    saa += (a.pixels[i] - ma) * (a.pixels[i] - ma);
    sbb += (b.pixels[i] - mb) * (b.pixels[i] - mb);
  }
  CHECK(ncc(a, b) == doctest::Approx(static_cast<double>(sab / std::sqrt(saa * sbb))).epsilon(1e-12));
}

TEST_CASE("ncc errors") {
  CHECK_THROWS_AS(ncc(random_patch(4, 4, 1), random_patch(4, 5, 1)), ValidationError);
  const Image flat(4, 4, 0.3);
  CHECK_THROWS_AS(ncc(flat, random_patch(4, 4, 1)), DegeneratePatchError);
  CHECK_THROWS_AS(ncc(random_patch(4, 4, 1), flat), DegeneratePatchError);
}

TEST_CASE("crop_subject_region") {
  const Image frame = random_patch(12, 10, 5);
  CHECK(crop_subject_region(frame, {0, 0, 12, 10}) == frame);
  const Image px = crop_subject_region(frame, {4, 3, 1, 1});
  REQUIRE(px.size() == 1);
  CHECK(px.pixels[0] == frame.at(3, 4));

  const Box box{2, 1, 5, 6};
  const Image patch = crop_subject_region(frame, box);
  Image blank(12, 10, 0.0);
  embed_region(blank, patch, box);
  for (int r = 0; r < 10; ++r) {
    for (int c = 0; c < 12; ++c) {
      const bool inside = c >= 2 && c < 7 && r >= 1 && r < 7;
      CHECK(blank.at(r, c) == (inside ? frame.at(r, c) : 0.0));
    }
  }
  CHECK_THROWS_AS(crop_subject_region(frame, {8, 0, 5, 2}), ValidationError);
  CHECK_THROWS_AS(crop_subject_region(frame, {-1, 0, 2, 2}), ValidationError);
  CHECK_THROWS_AS(crop_subject_region(frame, {0, 0, 0, 2}), ValidationError);
}

TEST_CASE("constant-expression stream yields only the seed") {
  std::vector<StreamFrame> stream;
  const Image face = crop_subject_region(expression(synth::Attribute::smile, 0.0), kFace);
  for (int i = 0; i < 20; ++i) stream.push_back({i, face});
  const auto ex = extract_key_gestures(stream, 4, 0.99);
  REQUIRE(ex.events.size() == 1);
  CHECK(ex.events[0].is_seed());
  CHECK(ex.events[0].frame_index == 0);
  CHECK(ex.events[0].subject_id == 4);
  CHECK(ex.dictionary.templates.size() == 1);
}

TEST_CASE("tau = -1 emits only the seed") {
  std::vector<StreamFrame> stream;
  for (int i = 0; i < 30; ++i) stream.push_back({i, random_patch(8, 8, 100 + i)});
  CHECK(extract_key_gestures(stream, 0, -1.0).events.size() == 1);
}

TEST_CASE("three distinct expression segments give three templates") {
  const Image smile = crop_subject_region(expression(synth::Attribute::smile, 1.0), kFace);
  const Image yawn = crop_subject_region(expression(synth::Attribute::yawn, 1.0), kFace);
  const Image eyes = crop_subject_region(expression(synth::Attribute::eye_closure, 1.0), kFace);
  const std::vector<Image> segments = {smile, yawn, eyes};
  // Brute-force confirmation of the separation the assertion relies on.
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(ncc(segments[i], segments[i]) > 0.9);
    for (std::size_t j = i + 1; j < 3; ++j) {
      INFO("segments " << i << "," << j << " ncc " << ncc(segments[i], segments[j]));
      CHECK(ncc(segments[i], segments[j]) < 0.9);
    }
  }
  std::vector<StreamFrame> stream;
  for (int s = 0; s < 3; ++s) {
    for (int k = 0; k < 10; ++k) stream.push_back({s * 10 + k, segments[s]});
  }
  const auto ex = extract_key_gestures(stream, 0, 0.9);
  CHECK(ex.dictionary.templates.size() == 3);
  REQUIRE(ex.events.size() == 3);
  CHECK(ex.events[0].frame_index == 0);
  CHECK(ex.events[1].frame_index == 10);
  CHECK(ex.events[2].frame_index == 20);
  CHECK(ex.events[1].best_ncc < 0.9);
}

TEST_CASE("dictionary growth stops at max_templates but events continue") {
  std::vector<StreamFrame> stream;
  for (int i = 0; i < 12; ++i) stream.push_back({i, random_patch(10, 10, 500 + i)});
  const auto ex = extract_key_gestures(stream, 0, 0.5, 3);
  CHECK(ex.dictionary.templates.size() == 3);
  CHECK(ex.events.size() == 12);
  for (std::size_t i = 1; i < ex.events.size(); ++i) {
    CHECK(ex.events[i].frame_index > ex.events[i - 1].frame_index);
    CHECK(ex.events[i].best_ncc < 0.5);
  }
}

TEST_CASE("raising tau never reduces the event count") {
  const auto schedule = synth::make_default_schedule(1, 200, 9);
  const auto frames = synth::generate_session(schedule, 0.03, 9);
  std::vector<StreamFrame> stream;
  for (const auto& f : frames) stream.push_back({f.frame_index, crop_subject_region(f.pixels, kFace)});
  std::size_t last = 0;
  for (double tau : {-1.0, 0.0, 0.5, 0.8, 0.9, 0.95, 0.98, 1.0}) {
    const auto n = extract_key_gestures(stream, 0, tau).events.size();
    CHECK(n >= last);
    CHECK(n <= stream.size());
    last = n;
  }
}

TEST_CASE("degenerate frames are skipped and counted") {
  std::vector<StreamFrame> stream;
  stream.push_back({0, Image(6, 6, 0.5)});
  stream.push_back({1, random_patch(6, 6, 1)});
  stream.push_back({2, Image(6, 6, 0.1)});
  stream.push_back({3, random_patch(6, 6, 2)});
  const auto ex = extract_key_gestures(stream, 2, 0.99);
  CHECK(ex.degenerate_skipped == 2);
  REQUIRE(!ex.events.empty());
  CHECK(ex.events[0].frame_index == 1);
  CHECK(ex.events[0].is_seed());
  for (const auto& t : ex.dictionary.templates) CHECK(patch_variance(t.patch) > kVarianceFloor);
}

TEST_CASE("extract_key_gestures preconditions") {
  std::vector<StreamFrame> empty;
  CHECK_THROWS_AS(extract_key_gestures(empty, 0), ValidationError);
  std::vector<StreamFrame> stream = {{0, random_patch(4, 4, 1)}, {0, random_patch(4, 4, 2)}};
  CHECK_THROWS_AS(extract_key_gestures(stream, 0), ValidationError);
  stream[1].frame_index = 1;
  CHECK_THROWS_AS(extract_key_gestures(stream, 0, 1.5), ValidationError);
  CHECK_THROWS_AS(extract_key_gestures(stream, 0, 0.9, 0), ValidationError);
}

TEST_CASE("report CSV round-trips with an empty seed field") {
  std::vector<KeyGestureEvent> events = {{3, 0}, {3, 17, 0.42}, {4, 2}};
  const auto path = std::filesystem::temp_directory_path() / "lglab_kg_report.csv";
  write_report(events, path);
  std::ifstream in(path);
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  CHECK(header == "subject_id,frame_index,best_ncc");
  CHECK(first == "3,0,");
  const auto back = read_report(path);
  REQUIRE(back.size() == 3);
  CHECK(back[0].is_seed());
  CHECK(back[1].best_ncc == 0.42);
  CHECK(back[2].subject_id == 4);
}
