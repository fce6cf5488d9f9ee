// SPDX-License-Identifier: Apache-2.0
//
// Flat named-tensor container.
//
//   meta-interp-ckpt v1
//   <name> <rows> <cols>
//   <rows·cols doubles, row-major, %.17g, space separated>
//   ...
#pragma once

#include <map>
#include <string>
#include <vector>

#include "metainterp/tensor.hpp"

namespace mi {

class Checkpoint {
 public:
  void put(const std::string& name, Tensor value);
  void put_scalar(const std::string& name, double value) { put(name, Tensor::scalar(value)); }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }
  /// Throws ParseError naming the entry when absent.
  const Tensor& get(const std::string& name) const;
  double get_scalar(const std::string& name) const;
  double get_scalar(const std::string& name, double fallback) const;

  /// Entry names in lexicographic order.
  std::vector<std::string> names() const;
  std::size_t size() const { return entries_.size(); }

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;

 private:
  std::map<std::string, Tensor> entries_;
};

}  // namespace mi
