// Order-independent summation: terms are converted to 2^-64 fixed point and
// accumulated in a signed 128-bit integer, so the total is exactly the same
// for any permutation of the inputs. Used where an estimator's contract
// promises bit-identical output under subject reordering. Terms of magnitude
// 2^39 or more fall back to plain accumulation (still deterministic for a
// fixed input order).
#pragma once

#include <cmath>
#include <cstdint>

namespace semavg::detail {

class ExactSum {
 public:
  void add(double v) {
    if (poisoned_) {
      plain_ += v;
      return;
    }
    int e = 0;
    const double m = std::frexp(v, &e);
    const auto m53 = static_cast<std::int64_t>(std::ldexp(m, 53));  // exact
    const int shift = e + 11;  // units of 2^-64
    if (shift > 50) {
      poisoned_ = true;
      plain_ = value_exact() + v;
      return;
    }
    if (shift >= 0)
      acc_ += static_cast<__int128>(m53) << shift;
    else
      acc_ += static_cast<__int128>(m53 >> -shift);
  }

  double value() const { return poisoned_ ? plain_ : value_exact(); }

 private:
  double value_exact() const { return static_cast<double>(acc_) * 0x1p-64; }

  __int128 acc_ = 0;
  double plain_ = 0.0;
  bool poisoned_ = false;
};

}  // namespace semavg::detail
