// Dataset layer: IDX parsing/serialization, raw blobs, synthetic generators,
// and the max-logit/max-softmax boundary scan.
#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "logitguard/dataset.hpp"
#include "logitguard/errors.hpp"
#include "logitguard/io.hpp"
#include "logitguard/network.hpp"

using Catch::Approx;
using namespace logitguard;

namespace {

// Hand-assembled IDX pair: two 2x2 images with known pixel bytes.
std::vector<unsigned char> idx_images_fixture() {
  std::vector<unsigned char> b = {
      0x00, 0x00, 0x08, 0x03,  // images magic
      0x00, 0x00, 0x00, 0x02,  // count = 2
      0x00, 0x00, 0x00, 0x02,  // rows = 2
      0x00, 0x00, 0x00, 0x02,  // cols = 2
      // image 0
      0, 255, 128, 51,
      // image 1
      255, 255, 0, 1,
  };
  return b;
}

std::vector<unsigned char> idx_labels_fixture() {
  return {
      0x00, 0x00, 0x08, 0x01,  // labels magic
      0x00, 0x00, 0x00, 0x02,  // count = 2
      1, 0,
  };
}

// Two logits [x1, -x1]: the maximum-softmax crossing sits exactly at x1 = 0
// while the max logit grows without bound away from it.
Network antisymmetric_net() {
  NetworkSpec spec;
  spec.input_shape = {2};
  spec.layers = {LayerSpec::dense(2)};
  spec.num_classes = 2;
  std::vector<Tensor> params = {
      Tensor({2, 2}, {1.0, 0.0, -1.0, 0.0}),
      Tensor({2}, {0.0, 0.0}),
  };
  return Network(spec, std::move(params));
}

}  // namespace

TEST_CASE("IDX: hand-built pair parses with exact pixel scaling") {
  const auto dir = testutil::scratch_dir("idx-parse");
  write_file_bytes(dir / "images.idx", idx_images_fixture());
  write_file_bytes(dir / "labels.idx", idx_labels_fixture());

  const LabeledDataset ds = load_idx(dir / "images.idx", dir / "labels.idx");
  REQUIRE(ds.size() == 2);
  CHECK(ds.num_classes == 2);  // inferred from max label 1
  CHECK(ds.split == "train");
  REQUIRE(ds.images[0].shape() == std::vector<std::size_t>{1, 2, 2});

  CHECK(ds.images[0][0] == 0.0);
  CHECK(ds.images[0][1] == 1.0);  // byte 255 maps to exactly 1.0
  CHECK(ds.images[0][2] == 128.0 / 255.0);
  CHECK(ds.images[0][3] == 51.0 / 255.0);
  CHECK(ds.images[1][3] == 1.0 / 255.0);
  CHECK(ds.labels == std::vector<std::size_t>{1, 0});
}

TEST_CASE("IDX: parse then save is byte-identical") {
  const auto dir = testutil::scratch_dir("idx-roundtrip");
  const auto ibytes = idx_images_fixture();
  const auto lbytes = idx_labels_fixture();
  write_file_bytes(dir / "images.idx", ibytes);
  write_file_bytes(dir / "labels.idx", lbytes);

  const LabeledDataset ds = load_idx(dir / "images.idx", dir / "labels.idx");
  save_idx(ds, dir / "images2.idx", dir / "labels2.idx");
  CHECK(read_file_bytes(dir / "images2.idx") == ibytes);
  CHECK(read_file_bytes(dir / "labels2.idx") == lbytes);
}

TEST_CASE("IDX: save quantizes with round-to-nearest") {
  const auto dir = testutil::scratch_dir("idx-quantize");
  LabeledDataset ds;
  ds.num_classes = 2;
  ds.images = {Tensor({1, 1, 2}, {1.0, 0.5}), Tensor({1, 1, 2}, {0.0, 2.0 / 255.0})};
  ds.labels = {0, 1};
  save_idx(ds, dir / "images.idx", dir / "labels.idx");

  const auto bytes = read_file_bytes(dir / "images.idx");
  REQUIRE(bytes.size() == 16 + 4);
  CHECK(bytes[16] == 255);
  CHECK(bytes[17] == 128);  // llround(0.5 * 255) = 128
  CHECK(bytes[18] == 0);
  CHECK(bytes[19] == 2);
}

TEST_CASE("IDX: malformed inputs raise FormatError") {
  const auto dir = testutil::scratch_dir("idx-errors");

  SECTION("labels magic where images magic belongs") {
    write_file_bytes(dir / "images.idx", idx_labels_fixture());
    write_file_bytes(dir / "labels.idx", idx_labels_fixture());
    try {
      load_idx(dir / "images.idx", dir / "labels.idx");
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("expected 0x00000803") != std::string::npos);
    }
  }

  SECTION("images magic where labels magic belongs") {
    write_file_bytes(dir / "images.idx", idx_images_fixture());
    write_file_bytes(dir / "labels.idx", idx_images_fixture());
    try {
      load_idx(dir / "images.idx", dir / "labels.idx");
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("expected 0x00000801") != std::string::npos);
    }
  }

  SECTION("truncated pixel data reports the byte offset") {
    auto ibytes = idx_images_fixture();
    ibytes.resize(ibytes.size() - 3);  // cut into image 1's pixels
    write_file_bytes(dir / "images.idx", ibytes);
    write_file_bytes(dir / "labels.idx", idx_labels_fixture());
    try {
      load_idx(dir / "images.idx", dir / "labels.idx");
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("truncated") != std::string::npos);
      CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
    }
  }

  SECTION("image/label count mismatch") {
    auto lbytes = idx_labels_fixture();
    lbytes[7] = 3;  // claim 3 labels
    lbytes.push_back(1);
    write_file_bytes(dir / "images.idx", idx_images_fixture());
    write_file_bytes(dir / "labels.idx", lbytes);
    try {
      load_idx(dir / "images.idx", dir / "labels.idx");
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("2 images vs 3 labels") != std::string::npos);
    }
  }

  SECTION("zero dimension in the header") {
    auto ibytes = idx_images_fixture();
    ibytes[11] = 0;  // rows = 0
    write_file_bytes(dir / "images.idx", ibytes);
    write_file_bytes(dir / "labels.idx", idx_labels_fixture());
    CHECK_THROWS_AS(load_idx(dir / "images.idx", dir / "labels.idx"), FormatError);
  }
}

TEST_CASE("dataset validation rejects inconsistent data") {
  LabeledDataset ds;
  ds.num_classes = 2;
  ds.images = {Tensor({2}, {0.5, 0.5})};
  ds.labels = {0};
  ds.validate();  // baseline passes

  SECTION("length mismatch") {
    ds.labels.push_back(1);
    CHECK_THROWS_AS(ds.validate(), DataError);
  }
  SECTION("label out of range") {
    ds.labels[0] = 2;
    CHECK_THROWS_AS(ds.validate(), DataError);
  }
  SECTION("pixel outside the unit interval") {
    ds.images[0] = Tensor({2}, {1.5, 0.0});
    CHECK_THROWS_AS(ds.validate(), DataError);
  }
  SECTION("mixed shapes") {
    ds.images.push_back(Tensor({3}, {0.1, 0.2, 0.3}));
    ds.labels.push_back(1);
    CHECK_THROWS_AS(ds.validate(), DataError);
  }
  SECTION("unknown split tag") {
    ds.split = "validation";
    CHECK_THROWS_AS(ds.validate(), DataError);
  }
  SECTION("empty dataset") {
    ds.images.clear();
    ds.labels.clear();
    CHECK_THROWS_AS(ds.validate(), DataError);
  }
}

TEST_CASE("dataset_id is content-addressed") {
  SynthSpec spec;
  spec.num_classes = 2;
  spec.per_class = 5;
  spec.input_shape = {2};
  spec.seed = 7;
  LabeledDataset a = synth_2d_two_class(spec);
  LabeledDataset b = synth_2d_two_class(spec);
  CHECK(dataset_id(a) == dataset_id(b));

  SECTION("any pixel change moves the id") {
    b.images[3] = Tensor({2}, {b.images[3][0], b.images[3][1] + 1e-12});
    CHECK(dataset_id(a) != dataset_id(b));
  }
  SECTION("any label change moves the id") {
    b.labels[0] = 1 - b.labels[0];
    CHECK(dataset_id(a) != dataset_id(b));
  }
}

TEST_CASE("raw blob round trip preserves every bit") {
  const auto dir = testutil::scratch_dir("raw-roundtrip");
  SynthSpec spec;
  spec.num_classes = 3;
  spec.per_class = 4;
  spec.input_shape = {1, 4, 4};
  spec.seed = 11;
  const LabeledDataset ds = synth_image_dataset(spec, 4, "test");

  save_dataset_raw(ds, dir / "data.bin", dir / "data.json");
  const LabeledDataset back = load_dataset_raw(dir / "data.bin", dir / "data.json");

  REQUIRE(back.size() == ds.size());
  CHECK(back.num_classes == ds.num_classes);
  CHECK(back.split == ds.split);
  CHECK(back.labels == ds.labels);
  for (std::size_t i = 0; i < ds.size(); ++i) CHECK(back.images[i] == ds.images[i]);

  SECTION("blob/sidecar size disagreement is caught") {
    auto blob = read_file_bytes(dir / "data.bin");
    blob.resize(blob.size() - 8);
    write_file_bytes(dir / "data.bin", blob);
    CHECK_THROWS_AS(load_dataset_raw(dir / "data.bin", dir / "data.json"), FormatError);
  }
}

TEST_CASE("synth_2d_two_class: determinism, balance, separability") {
  SynthSpec spec;
  spec.num_classes = 2;
  spec.per_class = 60;
  spec.input_shape = {2};
  spec.separation = 10.0;
  spec.seed = 42;

  const LabeledDataset a = synth_2d_two_class(spec);
  const LabeledDataset b = synth_2d_two_class(spec);
  REQUIRE(a.size() == 120);
  CHECK(a.labels == b.labels);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.images[i] == b.images[i]);

  std::size_t count0 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.labels[i] == 0) ++count0;
    const double x1 = a.images[i][0];
    // separation 10 puts each cluster 10 sigma from the midline; with this
    // frozen seed every sample lands on its own side of x1 = 0.5.
    if (a.labels[i] == 0)
      CHECK(x1 < 0.5);
    else
      CHECK(x1 > 0.5);
    CHECK(a.images[i][1] >= 0.0);
    CHECK(a.images[i][1] <= 1.0);
  }
  CHECK(count0 == 60);

  SECTION("different splits draw different noise") {
    const LabeledDataset t = synth_2d_two_class(spec, "test");
    CHECK(t.split == "test");
    CHECK(t.images[0] != a.images[0]);
  }
  SECTION("shape and class constraints enforced") {
    SynthSpec bad = spec;
    bad.input_shape = {3};
    CHECK_THROWS_AS(synth_2d_two_class(bad), ConfigError);
    bad = spec;
    bad.num_classes = 3;
    CHECK_THROWS_AS(synth_2d_two_class(bad), ConfigError);
    bad = spec;
    bad.separation = 0.0;
    CHECK_THROWS_AS(synth_2d_two_class(bad), ConfigError);
  }
}

TEST_CASE("synth_image_dataset: shapes, balance, determinism") {
  SynthSpec spec;
  spec.num_classes = 4;
  spec.per_class = 3;
  spec.input_shape = {1, 8, 8};
  spec.seed = 5;

  const LabeledDataset ds = synth_image_dataset(spec, 12);
  REQUIRE(ds.size() == 12);
  CHECK(ds.num_classes == 4);
  for (const Tensor& img : ds.images)
    CHECK(img.shape() == std::vector<std::size_t>{1, 12, 12});

  std::vector<std::size_t> per_class(4, 0);
  for (std::size_t lab : ds.labels) per_class[lab]++;
  for (std::size_t c = 0; c < 4; ++c) CHECK(per_class[c] == 3);

  const LabeledDataset again = synth_image_dataset(spec, 12);
  for (std::size_t i = 0; i < ds.size(); ++i) CHECK(again.images[i] == ds.images[i]);

  SECTION("same class structure across resolutions") {
    // With noise suppressed by a huge separation, the upsampled image at any
    // resolution is a pure nearest-neighbour blow-up of the 8x8 base pattern.
    SynthSpec quiet = spec;
    quiet.separation = 1e9;
    const LabeledDataset lo = synth_image_dataset(quiet, 8);
    const LabeledDataset hi = synth_image_dataset(quiet, 16);
    // Sample 0 of class 0 in both; pixel (2i, 2j) at side 16 maps to (i, j) at side 8.
    const Tensor& a8 = lo.images[0];
    const Tensor& a16 = hi.images[0];
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j)
        CHECK(a16[(2 * i) * 16 + 2 * j] == Approx(a8[i * 8 + j]).margin(1e-8));
  }
}

TEST_CASE("synth_resolution_family: ascending sides, shared structure") {
  SynthSpec base;
  base.num_classes = 3;
  base.per_class = 2;
  base.input_shape = {1, 8, 8};
  base.seed = 9;

  const auto family = synth_resolution_family(base, {8, 12, 16});
  REQUIRE(family.size() == 3);
  CHECK(family[0].images[0].shape() == std::vector<std::size_t>{1, 8, 8});
  CHECK(family[1].images[0].shape() == std::vector<std::size_t>{1, 12, 12});
  CHECK(family[2].images[0].shape() == std::vector<std::size_t>{1, 16, 16});
  for (const auto& ds : family) CHECK(ds.labels == family[0].labels);

  CHECK_THROWS_AS(synth_resolution_family(base, {8, 8}), ConfigError);
  CHECK_THROWS_AS(synth_resolution_family(base, {12, 8}), ConfigError);
  CHECK_THROWS_AS(synth_resolution_family(base, {}), ConfigError);
}

TEST_CASE("boundary_scan: logit grows unbounded while softmax saturates") {
  const Network net = antisymmetric_net();

  SECTION("crossing point has logit 0 and softmax one-half") {
    const auto rows = boundary_scan(net, 0.5, -1.0, 1.0, 2);
    REQUIRE(rows.size() == 3);
    CHECK(rows[1].x1 == 0.0);
    CHECK(rows[1].max_logit == 0.0);
    CHECK(rows[1].max_softmax == 0.5);
  }

  SECTION("far from the boundary the softmax pins at 1 but the logit keeps growing") {
    const auto rows = boundary_scan(net, 0.5, 0.0, 40.0, 4);
    REQUIRE(rows.size() == 5);
    CHECK(rows.back().x1 == 40.0);
    CHECK(rows.back().max_logit == 40.0);
    CHECK(rows.back().max_softmax >= 1.0 - 1e-9);
    // Logits strictly increase along the scan; softmax differences become
    // invisible long before the logit stops moving.
    for (std::size_t i = 1; i < rows.size(); ++i) {
      CHECK(rows[i].max_logit > rows[i - 1].max_logit);
      CHECK(rows[i].max_softmax >= rows[i - 1].max_softmax);
    }
    CHECK(rows[4].max_logit - rows[3].max_logit == Approx(10.0));
    CHECK(rows[4].max_softmax - rows[3].max_softmax < 1e-12);
  }

  SECTION("row grid is inclusive of both endpoints") {
    const auto rows = boundary_scan(net, 0.0, 0.0, 1.0, 10);
    REQUIRE(rows.size() == 11);
    CHECK(rows.front().x1 == 0.0);
    CHECK(rows.back().x1 == 1.0);
  }

  SECTION("argument validation") {
    CHECK_THROWS_AS(boundary_scan(net, 0.5, 0.0, 1.0, 0), ConfigError);
    CHECK_THROWS_AS(boundary_scan(net, 0.5, 1.0, 1.0, 4), ConfigError);
    const Network img = build_classifier(NetworkSpec::lenet5(), 0);
    CHECK_THROWS_AS(boundary_scan(img, 0.5, 0.0, 1.0, 4), ConfigError);
  }

  SECTION("CSV rendering") {
    const auto rows = boundary_scan(net, 0.5, 0.0, 1.0, 1);
    const std::string csv = boundary_scan_csv(rows);
    CHECK(csv.rfind("x1,max_logit,max_softmax\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  }
}
