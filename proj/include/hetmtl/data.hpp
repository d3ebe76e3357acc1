#pragma once

#include <array>
#include <string>
#include <string_view>
#include <utility>

#include "hetmtl/errors.hpp"
#include "hetmtl/nncore.hpp"

namespace hetmtl {

enum class Split { train = 0, val = 1, test = 2 };

inline constexpr std::array<Split, 3> kAllSplits{Split::train, Split::val, Split::test};

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    case Split::test:
      return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ArgumentError("unknown split '" + std::string(s) + "' (expected train, val or test)");
}

/// One task's samples for one role; rows of x pair with entries of y.
struct TaskDataset {
  Matrix x;
  Vector y;
  Split role = Split::train;
  int task = 0;

  Index rows() const { return x.rows(); }
  Index dim() const { return x.cols(); }

  void validate() const {
    if (x.rows() != y.size()) {
      throw ShapeError("TaskDataset(task " + std::to_string(task) + ", " +
                       std::string(to_string(role)) + "): X has " + std::to_string(x.rows()) +
                       " rows but y has " + std::to_string(y.size()));
    }
    if (!x.allFinite() || !y.allFinite()) {
      throw InputError("TaskDataset(task " + std::to_string(task) + "): non-finite entries");
    }
  }
};

struct TaskSplits {
  TaskDataset train;
  TaskDataset val;
  TaskDataset test;

  const TaskDataset& get(Split s) const {
    switch (s) {
      case Split::train:
        return train;
      case Split::val:
        return val;
      case Split::test:
        return test;
    }
    return train;
  }
  TaskDataset& get(Split s) { return const_cast<TaskDataset&>(std::as_const(*this).get(s)); }
};

}  // namespace hetmtl
