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

#ifndef STARMOE_ERRORS_HPP_
#define STARMOE_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace starmoe {

// Malformed arguments: shape mismatches, empty inputs, out-of-range knobs.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A value left the domain where the computation is defined (NaN, inf).
class NumericDomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// KL(p || q) with p_j > 0 and q_j == 0.
class InfiniteDivergence : public NumericDomainError {
 public:
  using NumericDomainError::NumericDomainError;
};

// An operation was called in the wrong order (e.g. tasks out of sequence).
class InvalidState : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidArgument(what);
}

}  // namespace detail
}  // namespace starmoe

#endif  // STARMOE_ERRORS_HPP_
