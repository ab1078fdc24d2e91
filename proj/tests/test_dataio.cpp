#include <gtest/gtest.h>

#include <cstring>
#include <limits>

#include <unistd.h>

#include "crcnn/dataio.hpp"
#include "crcnn/synthetic.hpp"
#include "oracles.hpp"

using namespace crcnn;

namespace {

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("crcnn_dataio_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

// Reads the container format byte by byte without the library's reader.
NamedTensors hand_decode(const std::string& bytes) {
  std::size_t pos = 0;
  auto u32 = [&] {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes.at(pos++))) << (8 * i);
    return v;
  };
  auto u64 = [&] {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(bytes.at(pos++))) << (8 * i);
    return v;
  };
  EXPECT_EQ(bytes.substr(0, 4), "CRCN");
  pos = 4;
  EXPECT_EQ(u32(), 1u);
  const std::uint32_t count = u32();
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = u32();
    std::string name = bytes.substr(pos, len);
    pos += len;
    Shape shape(u32());
    std::size_t vol = 1;
    for (auto& e : shape) {
      e = u64();
      vol *= e;
    }
    std::vector<double> data(vol);
    for (double& d : data) {
      const std::uint64_t bits = u64();
      std::memcpy(&d, &bits, 8);
    }
    out.emplace_back(name, Tensor(shape, data));
  }
  EXPECT_EQ(pos, bytes.size());
  return out;
}

template <typename Fn>
ContainerError::Kind container_error_kind(Fn&& fn) {
  try {
    fn();
  } catch (const ContainerError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no ContainerError";
  return ContainerError::Kind::kBadMagic;
}

std::vector<GroundTruth> random_annotations(Rng& rng, std::size_t n) {
  std::vector<GroundTruth> gts;
  for (std::size_t i = 0; i < n; ++i) {
    GroundTruth g;
    g.video_id = "vid" + std::to_string(rng.below(5));
    g.timestamp = static_cast<std::int64_t>(900 + i);
    g.box = oracle::random_box(rng);
    g.person_id = static_cast<std::int64_t>(rng.below(4));
    for (std::size_t k = 0, m = 1 + rng.below(3); k < m; ++k) g.class_ids.insert(static_cast<int>(rng.below(60)));
    gts.push_back(g);
  }
  return gts;
}

Box rounded(const Box& b) {
  auto r = [](double v) { return std::stod(detail::format_real(v)); };
  return {r(b.x1), r(b.y1), r(b.x2), r(b.y2)};
}

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.num_videos = 6;
  s.video_seconds = 2;
  s.fps = 2;
  s.frame_h = s.frame_w = 64;
  s.glyph_size = 8;
  s.min_box_px = 10;
  s.seed = 17;
  return s;
}

}  // namespace

TEST(SampleClip, FormulaAndClamping) {
  std::vector<std::size_t> want;
  for (std::size_t i = 0; i < 32; ++i) want.push_back(68 + 2 * i);
  EXPECT_EQ(sample_clip_indices(100, {32, 2}, 500), want);
  EXPECT_EQ(sample_clip_indices(0, {8, 8}, 500), (std::vector<std::size_t>{0, 0, 0, 0, 0, 8, 16, 24}));
  const auto s = sample_clip_indices(200, {16, 4}, 500);
  EXPECT_EQ(s.front(), 168u);
  EXPECT_EQ(s.back(), 228u);
  EXPECT_THROW(sample_clip_indices(0, {16, 8}, 10), ValidationError);
}

TEST(SampleClip, AlwaysTIndicesInRangeNondecreasing) {
  Rng rng(81);
  for (int rep = 0; rep < 500; ++rep) {
    const SamplingSpec spec = kSamplingPresets[rng.below(3)];
    const std::size_t len = 1 + rng.below(200);
    const auto idx = sample_clip_indices(rng.below(len + 40), spec, len);
    ASSERT_EQ(idx.size(), spec.num_frames);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      EXPECT_LT(idx[i], len);
      if (i) {
        EXPECT_GE(idx[i], idx[i - 1]);
      }
    }
  }
}

TEST(Annotations, ParseMergeAndRoundTrip) {
  TempDir dir;
  detail::write_text(dir / "a.csv", "vidA,902,0.1,0.2,0.5,0.9,12,0\nvidA,902,0.1,0.2,0.5,0.9,17,0\n");
  const auto gts = parse_annotations(dir / "a.csv");
  ASSERT_EQ(gts.size(), 1u);
  EXPECT_EQ(gts[0].class_ids, (std::set<int>{12, 17}));
  EXPECT_EQ(gts[0].timestamp, 902);

  Rng rng(82);
  auto original = random_annotations(rng, 50);
  write_annotations(dir / "r.csv", original);
  auto back = parse_annotations(dir / "r.csv");
  ASSERT_EQ(back.size(), original.size());
  for (auto& g : original) g.box = rounded(g.box);
  std::sort(original.begin(), original.end(), [](const auto& a, const auto& b) {
    return std::tie(a.video_id, a.timestamp, a.person_id) < std::tie(b.video_id, b.timestamp, b.person_id);
  });
  EXPECT_EQ(back, original);
  write_annotations(dir / "r2.csv", back);
  write_annotations(dir / "r3.csv", parse_annotations(dir / "r2.csv"));
  EXPECT_EQ(detail::read_bytes(dir / "r2.csv"), detail::read_bytes(dir / "r3.csv"));
}

TEST(Annotations, RejectsMalformedRowsWithLineNumber) {
  TempDir dir;
  const std::vector<std::string> bad{
      "vidA,902,0.1,0.2,0.5,0.9,12\n",          // too few fields
      "vidA,902,0.1,0.2,1.5,0.9,12,0\n",        // outside [0,1]
      "vidA,abc,0.1,0.2,0.5,0.9,12,0\n",        // non-integer timestamp
      "vidA,902,0.5,0.2,0.1,0.9,12,0\n",        // inverted box
  };
  for (const auto& row : bad) {
    detail::write_text(dir / "bad.csv", "vidA,1,0.1,0.1,0.2,0.2,1,0\n" + row);
    try {
      parse_annotations(dir / "bad.csv");
      ADD_FAILURE() << row;
    } catch (const ValidationError& e) {
      EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
    }
  }
  EXPECT_THROW(parse_annotations(dir / "missing.csv"), IoError);
}

TEST(Proposals, ScoreRangeAndRoundTrip) {
  TempDir dir;
  detail::write_text(dir / "p.csv", "v,3,0.1,0.1,0.4,0.5,1.0\n");
  ASSERT_EQ(parse_proposals(dir / "p.csv").size(), 1u);
  detail::write_text(dir / "p.csv", "v,3,0.1,0.1,0.4,0.5,1.5\n");
  EXPECT_THROW(parse_proposals(dir / "p.csv"), ValidationError);
  Rng rng(83);
  std::vector<Proposal> props;
  for (int i = 0; i < 40; ++i) props.push_back({"v" + std::to_string(i % 3), i, oracle::random_box(rng), rng.uniform()});
  write_proposals(dir / "q.csv", props);
  const auto back = parse_proposals(dir / "q.csv");
  ASSERT_EQ(back.size(), props.size());
  for (std::size_t i = 0; i < props.size(); ++i) {
    EXPECT_EQ(back[i].box, rounded(props[i].box));
    EXPECT_NEAR(back[i].score, props[i].score, 1e-8);
  }
}

TEST(Container, EmptyAndSmallRoundTrip) {
  EXPECT_TRUE(decode_container(encode_container({})).empty());
  const NamedTensors one{{"w", Tensor({2, 2}, std::vector<double>{1.5, -0.0, 1e-300, 7})}};
  const NamedTensors back = decode_container(encode_container(one));
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(std::memcmp(back[0].second.data(), one[0].second.data(), 32), 0);
  TempDir dir;
  tensor_container_write(dir / "t.crcn", one);
  EXPECT_EQ(tensor_container_read(dir / "t.crcn"), one);
}

TEST(Container, MatchesHandDecoder) {
  Rng rng(84);
  for (int rep = 0; rep < 20; ++rep) {
    NamedTensors ts;
    for (std::size_t i = 0, n = 1 + rng.below(5); i < n; ++i) {
      Shape s(1 + rng.below(4));
      for (auto& e : s) e = 1 + rng.below(4);
      ts.emplace_back("t" + std::to_string(i) + std::string(rng.below(4), 'x'), oracle::random_tensor(s, rng, -1e6, 1e6));
    }
    const std::string bytes = encode_container(ts);
    EXPECT_EQ(hand_decode(bytes), ts);
    EXPECT_EQ(decode_container(bytes), ts);
  }
}

TEST(Container, DistinctErrorKinds) {
  const std::string good = encode_container({{"a", Tensor({3}, 1.0)}});
  std::string magic = good;
  magic[0] = 'X';
  EXPECT_EQ(container_error_kind([&] { decode_container(magic); }), ContainerError::Kind::kBadMagic);
  std::string version = good;
  version[4] = 2;
  EXPECT_EQ(container_error_kind([&] { decode_container(version); }), ContainerError::Kind::kBadVersion);
  EXPECT_EQ(container_error_kind([&] { decode_container(good.substr(0, good.size() - 3)); }),
            ContainerError::Kind::kTruncated);
  EXPECT_EQ(container_error_kind([&] { decode_container(good + "z"); }), ContainerError::Kind::kTrailingBytes);
  EXPECT_EQ(container_error_kind([&] { encode_container({{"a", Tensor({1})}, {"a", Tensor({1})}}); }),
            ContainerError::Kind::kDuplicateName);
}

TEST(BankIo, RoundTrips) {
  TempDir dir;
  bank_write(dir / "e.jsonl", FeatureBank{});
  EXPECT_EQ(fs::file_size(dir / "e.jsonl"), 0u);
  EXPECT_TRUE(bank_read(dir / "e.jsonl").empty());

  FeatureBank one;
  one.add("v", 3, 1, Tensor::vector({0.1, -2.5, 1e-17}));
  bank_write(dir / "o.jsonl", one);
  EXPECT_EQ(bank_read(dir / "o.jsonl"), one);

  Rng rng(85);
  FeatureBank big;
  std::vector<std::tuple<std::string, std::int64_t, std::int64_t>> keys;
  while (big.size() < 1000) {
    const std::string v = "v" + std::to_string(rng.below(7));
    const auto t = static_cast<std::int64_t>(rng.below(100));
    const auto p = static_cast<std::int64_t>(rng.below(5));
    try {
      big.add(v, t, p, oracle::random_tensor({6}, rng));
    } catch (const ValidationError&) {
    }
  }
  bank_write(dir / "b.jsonl", big);
  const FeatureBank back = bank_read(dir / "b.jsonl");
  EXPECT_EQ(back, big);
  bank_write(dir / "b2.jsonl", back);
  EXPECT_EQ(detail::read_bytes(dir / "b.jsonl"), detail::read_bytes(dir / "b2.jsonl"));
}

TEST(BankIo, RejectsDimensionMismatch) {
  TempDir dir;
  detail::write_text(dir / "m.jsonl",
                     "{\"video_id\":\"v\",\"timestamp\":0,\"person_id\":0,\"feature\":[1,2]}\n"
                     "{\"video_id\":\"v\",\"timestamp\":1,\"person_id\":0,\"feature\":[1,2,3]}\n");
  try {
    bank_read(dir / "m.jsonl");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos);
  }
}

TEST(Synthetic, DeterministicFiles) {
  TempDir a, b;
  generate_synthetic(small_spec(), a.path());
  generate_synthetic(small_spec(), b.path());
  for (const char* f : {"manifest.json", "annotations.csv", "proposals.csv", "videos/v0003.crcn"}) {
    EXPECT_EQ(detail::read_bytes(a / f), detail::read_bytes(b / f)) << f;
  }
  SyntheticSpec other = small_spec();
  other.seed = 18;
  TempDir c;
  generate_synthetic(other, c.path());
  EXPECT_NE(detail::read_bytes(a / "videos/v0000.crcn"), detail::read_bytes(c / "videos/v0000.crcn"));
}

TEST(Synthetic, RejectsGlyphNotSmallerThanBox) {
  SyntheticSpec s = small_spec();
  s.glyph_size = s.min_box_px;
  EXPECT_THROW(s.validate(), ValidationError);
}

TEST(Synthetic, SizeMixControlsBins) {
  SyntheticSpec s = small_spec();
  s.num_videos = 30;
  s.box_size_mix = {1, 0, 0, 0, 0};
  const auto tmpl = glyph_templates(s.num_glyphs(), s.seed);
  for (std::size_t i = 0; i < s.num_videos; ++i) {
    for (const auto& a : synthesize_video(s, i, tmpl).actors) EXPECT_EQ(size_bin(a.box), SizeBin::kXS);
  }
  // Histogram of written annotations equals a regenerate-and-count.
  s.box_size_mix = {4, 2, 1, 1, 1};
  TempDir dir;
  const auto ds = generate_synthetic(s, dir.path());
  std::array<std::size_t, 5> from_file{}, recount{};
  for (const auto& g : parse_annotations(dir / "annotations.csv")) ++from_file[static_cast<std::size_t>(size_bin(g.box))];
  for (std::size_t i = 0; i < s.num_videos; ++i) {
    for (const auto& a : synthesize_video(s, i, tmpl).actors) recount[static_cast<std::size_t>(size_bin(a.box))] += s.video_seconds;
  }
  EXPECT_EQ(from_file, recount);
  EXPECT_GT(from_file[0], from_file[4]);
}

TEST(Synthetic, GlyphInsideBoxAndProposalsOverlap) {
  SyntheticSpec s = small_spec();
  s.num_videos = 20;
  const auto tmpl = glyph_templates(s.num_glyphs(), s.seed);
  for (std::size_t i = 0; i < s.num_videos; ++i) {
    for (const auto& a : synthesize_video(s, i, tmpl).actors) {
      const double cx = (static_cast<double>(a.gx) + s.glyph_size / 2.0) / 64.0;
      const double cy = (static_cast<double>(a.gy) + s.glyph_size / 2.0) / 64.0;
      EXPECT_GT(cx, a.box.x1);
      EXPECT_LT(cx, a.box.x2);
      EXPECT_GT(cy, a.box.y1);
      EXPECT_LT(cy, a.box.y2);
    }
  }
  TempDir dir;
  const auto ds = generate_synthetic(s, dir.path());
  ASSERT_EQ(ds.proposals.size(), ds.annotations.size());
  for (std::size_t i = 0; i < ds.proposals.size(); ++i) {
    EXPECT_GE(iou(ds.proposals[i].box, ds.annotations[i].box), 0.7);
  }
}

TEST(Synthetic, GlyphTemplatesPixelDistinct) {
  for (std::size_t size = 6; size <= 16; ++size) {
    const auto all = glyph_templates(kMaxGlyphs, 3);
    for (std::size_t i = 0; i < all.size(); ++i) {
      for (std::size_t j = 0; j < i; ++j) {
        EXPECT_GT(max_abs_diff(render_glyph(all[i], size), render_glyph(all[j], size)), 0.5)
            << size << " " << i << " " << j;
      }
    }
  }
}

// Slide every template over every glyph-sized window inside the annotated
// box; the best match must name the annotated class.
TEST(Synthetic, TemplateMatchingRecoversEveryClass) {
  SyntheticSpec s = small_spec();
  s.num_videos = 25;
  s.num_classes = 15;
  const auto tmpl = glyph_templates(s.num_glyphs(), s.seed);
  std::vector<Tensor> rendered;
  for (const auto& t : tmpl) rendered.push_back(render_glyph(t, s.glyph_size));
  std::size_t total = 0, correct = 0;
  for (std::size_t i = 0; i < s.num_videos; ++i) {
    const SyntheticVideo v = synthesize_video(s, i, tmpl);
    for (const auto& a : v.actors) {
      double best = std::numeric_limits<double>::infinity();
      int best_class = -1;
      for (std::size_t y0 = a.py1; y0 + s.glyph_size <= a.py2; ++y0) {
        for (std::size_t x0 = a.px1; x0 + s.glyph_size <= a.px2; ++x0) {
          for (std::size_t g = 0; g < rendered.size(); ++g) {
            double ssd = 0.0;
            for (std::size_t y = 0; y < s.glyph_size; ++y)
              for (std::size_t x = 0; x < s.glyph_size; ++x)
                for (std::size_t c = 0; c < 3; ++c) {
                  const double d = v.frames.at(0, y0 + y, x0 + x, c) - rendered[g].at(y, x, c);
                  ssd += d * d;
                }
            if (ssd < best) {
              best = ssd;
              best_class = static_cast<int>(g);
            }
          }
        }
      }
      ++total;
      correct += best_class == a.class_id;
    }
  }
  EXPECT_GT(total, 20u);
  EXPECT_EQ(correct, total);
}

TEST(Synthetic, NeighborCorrelationCopiesFirstGlyph) {
  SyntheticSpec s = small_spec();
  s.num_videos = 20;
  s.actors_min = 2;
  s.neighbor_correlation = 1.0;
  const auto tmpl = glyph_templates(s.num_glyphs(), s.seed);
  for (std::size_t i = 0; i < s.num_videos; ++i) {
    const auto v = synthesize_video(s, i, tmpl);
    for (const auto& a : v.actors) EXPECT_EQ(a.class_id, v.actors.front().class_id);
  }
  s.neighbor_correlation = 1.5;
  EXPECT_THROW(s.validate(), ValidationError);
}
