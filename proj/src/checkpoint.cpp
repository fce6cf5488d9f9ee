// SPDX-License-Identifier: Apache-2.0
#include "metainterp/checkpoint.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "metainterp/errors.hpp"

namespace mi {
namespace {
constexpr const char* kHeader = "meta-interp-ckpt v1";
}

void Checkpoint::put(const std::string& name, Tensor value) {
  if (name.empty() || name.find_first_of(" \t\n") != std::string::npos) {
    throw Error("checkpoint entry names must be nonempty and free of whitespace");
  }
  entries_[name] = std::move(value);
}

const Tensor& Checkpoint::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ParseError("checkpoint has no entry '" + name + "'");
  return it->second;
}

double Checkpoint::get_scalar(const std::string& name) const { return get(name).item(); }

double Checkpoint::get_scalar(const std::string& name, double fallback) const {
  return has(name) ? get_scalar(name) : fallback;
}

std::vector<std::string> Checkpoint::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [k, v] : entries_) out.push_back(k);
  return out;
}

void Checkpoint::save(const std::string& path) const {
  // Write-then-rename so an interrupted save never leaves a torn checkpoint.
  const std::string tmp = path + ".tmp";
  std::FILE* f = std::fopen(tmp.c_str(), "w");
  if (f == nullptr) throw Error("cannot open '" + tmp + "' for writing");
  std::fprintf(f, "%s\n", kHeader);
  for (const auto& [name, t] : entries_) {
    std::fprintf(f, "%s %zu %zu\n", name.c_str(), t.rows(), t.cols());
    for (std::size_t i = 0; i < t.size(); ++i) std::fprintf(f, i ? " %.17g" : "%.17g", t[i]);
    std::fputc('\n', f);
  }
  const bool failed = std::ferror(f) != 0;
  if (std::fclose(f) != 0 || failed) throw Error("failed writing '" + tmp + "'");
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error("cannot move checkpoint to '" + path + "'");
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line) || line != kHeader) {
    throw ParseError("expected header '" + std::string(kHeader) + "'", 1);
  }
  Checkpoint ck;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream head(line);
    std::string name;
    std::size_t rows = 0, cols = 0;
    std::string extra;
    if (!(head >> name >> rows >> cols) || (head >> extra)) {
      throw ParseError("expected '<name> <rows> <cols>'", lineno);
    }
    std::string data;
    if (!std::getline(in, data)) throw ParseError("missing data for '" + name + "'", lineno + 1);
    ++lineno;
    std::vector<double> values;
    values.reserve(rows * cols);
    const char* p = data.c_str();
    while (*p != '\0') {
      while (*p == ' ') ++p;
      if (*p == '\0') break;
      char* end = nullptr;
      errno = 0;
      const double v = std::strtod(p, &end);
      if (end == p || errno == ERANGE) throw ParseError("bad number in '" + name + "'", lineno);
      values.push_back(v);
      p = end;
    }
    if (values.size() != rows * cols) {
      throw ParseError("entry '" + name + "' has " + std::to_string(values.size()) +
                           " values, expected " + std::to_string(rows * cols),
                       lineno);
    }
    if (ck.has(name)) throw ParseError("duplicate entry '" + name + "'", lineno);
    ck.entries_[name] = Tensor(Shape{rows, cols}, std::move(values));
  }
  return ck;
}

}  // namespace mi
