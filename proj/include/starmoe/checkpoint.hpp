/* Copyright 2026 The StaR-MoE Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef STARMOE_CHECKPOINT_HPP_
#define STARMOE_CHECKPOINT_HPP_

// Text checkpoint of a Network. Every double is written as a C99 hex-float
// so a reload is bit-exact. Layout (one token stream, whitespace separated):
//
//   starmoe-checkpoint 1
//   seed <init seed>
//   matrix stem <rows> <cols> <values...>
//   layers <L>
//   layer <i> k <k> expandable <0|1> experts <E>
//     matrix base_w1 ...  matrix base_w2 ...
//     expert <j> frozen <0|1>  matrix w_down ...  matrix w_up ...
//     matrix router ...
//   matrix classifier ...
//   end

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "starmoe/errors.hpp"
#include "starmoe/moe.hpp"

namespace starmoe {

namespace detail {

inline std::string hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline void write_matrix(std::ostream& os, const char* name, const DenseMatrix& m) {
  os << "matrix " << name << ' ' << m.rows() << ' ' << m.cols();
  for (std::size_t i = 0; i < m.size(); ++i) os << (i % 8 == 0 ? "\n " : " ") << hexfloat(m.data()[i]);
  os << '\n';
}

class TokenReader {
 public:
  explicit TokenReader(std::istream& is) : is_(is) {}

  std::string next() {
    std::string tok;
    if (!(is_ >> tok)) throw InvalidArgument("checkpoint: unexpected end of input");
    return tok;
  }

  void expect(const std::string& want) {
    const std::string got = next();
    if (got != want) throw InvalidArgument("checkpoint: expected '" + want + "', found '" + got + "'");
  }

  std::uint64_t integer() {
    const std::string tok = next();
    try {
      std::size_t used = 0;
      const auto v = std::stoull(tok, &used);
      if (used != tok.size()) throw InvalidArgument("");
      return v;
    } catch (const std::exception&) {
      throw InvalidArgument("checkpoint: bad integer '" + tok + "'");
    }
  }

  double real() {
    const std::string tok = next();
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size()) throw InvalidArgument("checkpoint: bad number '" + tok + "'");
    return v;
  }

  DenseMatrix matrix(const std::string& name) {
    expect("matrix");
    expect(name);
    const std::size_t rows = integer();
    const std::size_t cols = integer();
    std::vector<double> data(rows * cols);
    for (double& v : data) v = real();
    return DenseMatrix(rows, cols, std::move(data));
  }

 private:
  std::istream& is_;
};

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Network& net, std::uint64_t seed = 0) {
  os << "starmoe-checkpoint 1\n";
  os << "seed " << seed << '\n';
  detail::write_matrix(os, "stem", net.stem);
  os << "layers " << net.layers.size() << '\n';
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const MoELayer& layer = net.layers[l];
    os << "layer " << l << " k " << layer.k << " expandable " << (layer.expandable ? 1 : 0) << " experts "
       << layer.experts.size() << '\n';
    detail::write_matrix(os, "base_w1", layer.base.w1);
    detail::write_matrix(os, "base_w2", layer.base.w2);
    for (std::size_t e = 0; e < layer.experts.size(); ++e) {
      os << "expert " << e << " frozen " << (layer.experts[e].frozen ? 1 : 0) << '\n';
      detail::write_matrix(os, "w_down", layer.experts[e].w_down);
      detail::write_matrix(os, "w_up", layer.experts[e].w_up);
    }
    detail::write_matrix(os, "router", layer.router.w_router);
  }
  detail::write_matrix(os, "classifier", net.classifier);
  os << "end\n";
}

inline std::string checkpoint_string(const Network& net, std::uint64_t seed = 0) {
  std::ostringstream os;
  write_checkpoint(os, net, seed);
  return os.str();
}

struct LoadedCheckpoint {
  Network net;
  std::uint64_t seed = 0;
};

inline LoadedCheckpoint read_checkpoint(std::istream& is) {
  detail::TokenReader in(is);
  in.expect("starmoe-checkpoint");
  if (in.integer() != 1) throw InvalidArgument("checkpoint: unsupported version");
  LoadedCheckpoint out;
  in.expect("seed");
  out.seed = in.integer();
  out.net.stem = in.matrix("stem");
  in.expect("layers");
  const std::size_t layer_count = in.integer();
  for (std::size_t l = 0; l < layer_count; ++l) {
    MoELayer layer;
    in.expect("layer");
    if (in.integer() != l) throw InvalidArgument("checkpoint: layers out of order");
    in.expect("k");
    layer.k = in.integer();
    in.expect("expandable");
    layer.expandable = in.integer() != 0;
    in.expect("experts");
    const std::size_t experts = in.integer();
    layer.base.w1 = in.matrix("base_w1");
    layer.base.w2 = in.matrix("base_w2");
    for (std::size_t e = 0; e < experts; ++e) {
      AdapterExpert ex;
      in.expect("expert");
      if (in.integer() != e) throw InvalidArgument("checkpoint: experts out of order");
      in.expect("frozen");
      ex.frozen = in.integer() != 0;
      ex.w_down = in.matrix("w_down");
      ex.w_up = in.matrix("w_up");
      layer.experts.push_back(std::move(ex));
    }
    layer.router.w_router = in.matrix("router");
    if (layer.router.e_total() != layer.experts.size())
      throw InvalidArgument("checkpoint: router width differs from expert count");
    out.net.layers.push_back(std::move(layer));
  }
  out.net.classifier = in.matrix("classifier");
  in.expect("end");
  return out;
}

inline void save_checkpoint(const std::string& path, const Network& net, std::uint64_t seed = 0) {
  std::ofstream os(path);
  if (!os) throw InvalidArgument("save_checkpoint: cannot open " + path);
  write_checkpoint(os, net, seed);
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InvalidArgument("load_checkpoint: cannot open " + path);
  return read_checkpoint(is);
}

// FNV-1a over the checkpoint text of a component.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t matrix_hash(const DenseMatrix& m) {
  std::ostringstream os;
  detail::write_matrix(os, "m", m);
  return fnv1a(os.str());
}

struct FrozenHashes {
  std::uint64_t stem = 0;
  std::vector<std::uint64_t> base_blocks;  // per layer
  // (layer, expert) -> hash for every frozen expert
  std::vector<std::pair<std::pair<std::size_t, std::size_t>, std::uint64_t>> frozen_experts;

  friend bool operator==(const FrozenHashes&, const FrozenHashes&) = default;
};

inline FrozenHashes frozen_hashes(const Network& net) {
  FrozenHashes h;
  h.stem = matrix_hash(net.stem);
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const MoELayer& layer = net.layers[l];
    h.base_blocks.push_back(matrix_hash(layer.base.w1) ^ (matrix_hash(layer.base.w2) * 31));
    for (std::size_t e = 0; e < layer.experts.size(); ++e) {
      if (!layer.experts[e].frozen) continue;
      std::ostringstream os;
      detail::write_matrix(os, "w_down", layer.experts[e].w_down);
      detail::write_matrix(os, "w_up", layer.experts[e].w_up);
      h.frozen_experts.push_back({{l, e}, fnv1a(os.str())});
    }
  }
  return h;
}

}  // namespace starmoe

#endif  // STARMOE_CHECKPOINT_HPP_
