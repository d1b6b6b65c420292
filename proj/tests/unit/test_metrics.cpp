// SPDX-License-Identifier: Apache-2.0
#include <vector>

#include "doctest.h"

#include "amn/metrics.hpp"
#include "amn/rng.hpp"
#include "support/oracles.hpp"
#include "util.hpp"

using namespace amn;
using namespace amn::metrics;
using amn::testing::TempDir;

namespace {

Tensor column_probs(const std::vector<double> &v) { return Tensor({v.size(), 1}, v); }

std::vector<bool> column(const std::vector<std::vector<bool>> &m, std::size_t k) {
  std::vector<bool> out;
  for (const auto &row : m)
    out.push_back(row[k]);
  return out;
}

} // namespace

TEST_SUITE("metrics") {

TEST_CASE("prf conventions") {
  CHECK(prf({0, 0, 0}).f1 == 1.0);
  CHECK(prf({0, 2, 0}).precision == 0.0);
  CHECK(prf({0, 0, 3}).recall == 0.0);
  const Prf p = prf({2, 1, 1});
  CHECK(p.precision == doctest::Approx(2.0 / 3.0));
  CHECK(p.f1 == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("binarize") {
  for (bool b : column(binarize(Tensor::full({5, 2}, 0.6)), 1))
    CHECK(b);
  const auto spike = column(binarize(column_probs({0, 0, 0.9, 0, 0}), 0.5, 3), 0);
  for (bool b : spike)
    CHECK_FALSE(b);
  Rng rng(4);
  std::vector<double> v(50);
  for (double &x : v)
    x = rng.uniform();
  const auto plain = column(binarize(column_probs(v), 0.3, 1), 0);
  for (std::size_t i = 0; i < v.size(); ++i)
    CHECK(plain[i] == (v[i] >= 0.3));
  CHECK_THROWS(binarize(column_probs(v), 0.5, 4));
}

TEST_CASE("decode_events") {
  std::vector<std::vector<bool>> none(20, std::vector<bool>(2, false));
  CHECK(decode_events(none, 0.02).empty());

  auto five = none;
  for (std::size_t t = 5; t <= 9; ++t)
    five[t][1] = true;
  const auto ev = decode_events(five, 0.02);
  REQUIRE(ev.size() == 1);
  CHECK(ev[0].label == 1);
  CHECK(ev[0].onset == doctest::Approx(0.10));
  CHECK(ev[0].offset == doctest::Approx(0.20));

  auto two = five;
  two[7][1] = false;
  CHECK(decode_events(two, 0.02).size() == 2);
}

TEST_CASE("tagging examples") {
  std::map<std::string, TagSet> truth{{"a", {0, 1}}, {"b", {1}}};
  CHECK(tagging_score(truth, truth, 2).macro.f1 == 1.0);

  const std::map<std::string, TagSet> t1{{"x", {0, 1}}}, p1{{"x", {0}}};
  const auto r = tagging_score(p1, t1, 2);
  CHECK(r.class_prf(0).f1 == 1.0);
  CHECK(r.class_prf(1).f1 == 0.0);
  CHECK(r.macro.f1 == doctest::Approx(0.5));

  const std::map<std::string, TagSet> empty{{"a", {}}, {"b", {}}};
  CHECK(tagging_score(empty, truth, 2).micro.recall == 0.0);
  const std::map<std::string, TagSet> other{{"a", {}}, {"c", {}}};
  CHECK_THROWS(tagging_score(other, truth, 2));
}

TEST_CASE("segment examples") {
  const auto r = segment_score({{0, 0.0, 1.0}}, {{0, 0.0, 1.5}}, 2.0, 1);
  CHECK(r.per_class[0] == Counts{1, 0, 1});
  CHECK(r.class_prf(0).f1 == doctest::Approx(2.0 / 3.0));

  const std::vector<Event> same{{0, 0.2, 1.7}, {1, 0.5, 3.0}};
  CHECK(segment_score(same, same, 3.0, 2).micro.f1 == 1.0);

  const auto fp = segment_score({{0, 2.2, 2.6}}, {{0, 0.1, 0.9}}, 3.0, 1);
  CHECK(fp.per_class[0] == Counts{0, 1, 1});
  CHECK_THROWS(segment_score({{0, 2.5, 3.5}}, {}, 3.0, 1));
}

TEST_CASE("event examples") {
  const std::vector<Event> truth{{0, 1.0, 2.0}};
  CHECK(event_score({{0, 1.15, 2.5}}, truth, 1).per_class[0] == Counts{0, 1, 1});
  CHECK(event_score(truth, truth, 1).per_class[0] == Counts{1, 0, 0});
  CHECK(event_score({{0, 1.19, 2.19}}, truth, 1).per_class[0] == Counts{1, 0, 0});
  CHECK(event_score({{0, 1.0, 2.0}}, {{1, 1.0, 2.0}}, 2).micro_counts == Counts{0, 1, 1});

  // Long references get the proportional offset collar.
  CHECK(event_score({{0, 0.0, 6.9}}, {{0, 0.0, 5.0}}, 1).per_class[0] == Counts{0, 1, 1});
  CHECK(event_score({{0, 0.0, 5.9}}, {{0, 0.0, 5.0}}, 1).per_class[0] == Counts{1, 0, 0});
}

TEST_CASE("metric properties on random instances") {
  Rng rng(77);
  for (int i = 0; i < 200; ++i) {
    const auto truth = amn::testing::random_events(rng, 5, 3, 4000);
    const auto pred = amn::testing::jitter(rng, truth, 4000);

    for (const auto &r : {event_score(truth, truth, 3), segment_score(truth, truth, 4.0, 3)})
      CHECK(r.micro.f1 == 1.0);

    // With a fixed offset collar the matching criterion is symmetric.
    const EventCollars fixed{0.2, 0.2, 0.0};
    const auto fwd = event_score(pred, truth, 3, fixed);
    const auto rev = event_score(truth, pred, 3, fixed);
    CHECK(fwd.micro_counts.fp == rev.micro_counts.fn);
    CHECK(fwd.micro_counts.fn == rev.micro_counts.fp);
    CHECK(fwd.micro.precision == rev.micro.recall);

    // Dropping a prediction that has no partner cannot lower event F1.
    auto extra = pred;
    extra.push_back({rng.below(3), 0.0, 0.001});
    const double before = event_score(extra, truth, 3, fixed).micro.f1;
    if (event_score(extra, truth, 3, fixed).micro_counts.fp > fwd.micro_counts.fp)
      CHECK(fwd.micro.f1 >= before);

    CHECK(event_score(pred, truth, 3).per_class ==
          amn::testing::brute_event(pred, truth, 3));
  }
}

TEST_CASE("strong TSV round trip and errors") {
  TempDir dir("tsv");
  const std::vector<StrongRow> rows{{"a.wav", 0.5, 1.25, "dog"}, {"b.wav", 2.0, 3.5, "siren"}};
  write_strong_tsv(dir / "x.tsv", rows);
  const auto back = read_strong_tsv(dir / "x.tsv");
  REQUIRE(back.size() == 2);
  CHECK(back[1].file == "b.wav");
  CHECK(back[1].onset == 2.0);
  CHECK(back[1].label == "siren");

  amn::testing::spit(dir / "bad.tsv", "a.wav\t0.1\t0.5\tdog\nb.wav\t0.2\tcat\n");
  try {
    read_strong_tsv(dir / "bad.tsv");
    FAIL("expected parse error");
  } catch (const std::exception &e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }
  amn::testing::spit(dir / "order.tsv", "a.wav\t0.5\t0.5\tdog\n");
  CHECK_THROWS(read_strong_tsv(dir / "order.tsv"));
}

TEST_CASE("report layout") {
  const auto r = make_report({{1, 0, 1}, {0, 0, 0}});
  const std::string csv = report_csv("event", r, {"a", "b"});
  CHECK(csv.rfind("family,class,f1,precision,recall,tp,fp,fn\n", 0) == 0);
  CHECK(csv.find("event,a,") != std::string::npos);
  CHECK(csv.find("event,micro,") != std::string::npos);
  CHECK(csv.find("event,macro,") != std::string::npos);
  CHECK(r.macro.f1 == doctest::Approx(2.0 / 3.0));
  const std::string text = report_text("event", r, {"a", "b"});
  CHECK(text.find("F1") < text.find("Precision"));
  CHECK(text.find("Precision") < text.find("Recall"));
}

} // TEST_SUITE
