#include "support/doctest.hpp"

#include <algorithm>
#include <set>

#include "querypose/errors.hpp"
#include "querypose/part_division.hpp"

using namespace querypose;

TEST_SUITE("part_division") {
  TEST_CASE("built-in schemes have the expected part counts") {
    CHECK(part_division('a').num_parts() == 17);
    CHECK(part_division('b').num_parts() == 13);
    CHECK(part_division('c').num_parts() == 7);
    CHECK(part_division('d').num_parts() == 5);
  }

  TEST_CASE("scheme a is the identity mapping") {
    auto d = part_division('a');
    for (int k = 0; k < 17; ++k) CHECK(d.parts[k] == std::vector<int>{k});
  }

  TEST_CASE("scheme b groups the head") {
    auto d = part_division('b');
    CHECK(d.parts[0] == std::vector<int>{kNose, kLeftEye, kRightEye, kLeftEar, kRightEar});
    for (std::size_t m = 1; m < d.parts.size(); ++m) CHECK(d.parts[m].size() == 1);
  }

  TEST_CASE("scheme c has seven rigid parts") {
    auto d = part_division('c');
    CHECK(d.parts[0].size() == 5);
    CHECK(d.parts[1] == std::vector<int>{kLeftShoulder, kRightShoulder});
    CHECK(d.parts[2] == std::vector<int>{kLeftHip, kRightHip});
    CHECK(d.parts[3] == std::vector<int>{kLeftElbow, kLeftWrist});
    CHECK(d.parts[6] == std::vector<int>{kRightKnee, kRightAnkle});
  }

  TEST_CASE("every scheme partitions the keypoints") {
    for (char s : {'a', 'b', 'c', 'd'}) {
      auto d = part_division(s);
      std::multiset<int> seen;
      for (const auto& p : d.parts) seen.insert(p.begin(), p.end());
      CHECK(seen.size() == 17);
      CHECK(std::set<int>(seen.begin(), seen.end()).size() == 17);
      CHECK(d.num_keypoints == 17);
      auto owner = d.part_of();
      for (int m = 0; m < d.num_parts(); ++m) {
        for (int k : d.parts[m]) CHECK(owner[k] == m);
      }
    }
  }

  TEST_CASE("unknown schemes are rejected") {
    CHECK_THROWS_AS(part_division('e'), ConfigError);
    CHECK_THROWS_AS(part_division('C'), ConfigError);
  }

  TEST_CASE("custom divisions must be partitions") {
    auto ok = custom_part_division({{0, 2}, {1}}, 3);
    CHECK(ok.num_parts() == 2);
    CHECK(ok.scheme == "custom");
    CHECK_THROWS_AS(custom_part_division({{0, 1}, {1, 2}}, 3), ConfigError);
    CHECK_THROWS_AS(custom_part_division({{0, 1}}, 3), ConfigError);
    CHECK_THROWS_AS(custom_part_division({{0, 5}}, 2), ConfigError);
    CHECK_THROWS_AS(custom_part_division({{0}, {}}, 1), ConfigError);
    CHECK_THROWS_AS(custom_part_division({}, 3), ConfigError);
  }

  TEST_CASE("keypoint names follow the coco order") {
    auto& names = coco_keypoint_names();
    CHECK(names.size() == 17);
    CHECK(names[kNose] == "nose");
    CHECK(names[kRightAnkle] == "right_ankle");
  }
}
