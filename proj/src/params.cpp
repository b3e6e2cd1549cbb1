#include "clvm/params.hpp"

#include <sstream>

#include "clvm/errors.hpp"

namespace clvm {

void ClvmParams::validate() const {
  const Index d = mu_x.size();
  if (d < 1) throw ConfigError("params: dimension must be positive");
  if (mu_y.size() != d || S.rows() != d || W.rows() != d) {
    std::ostringstream msg;
    msg << "params: inconsistent shapes (mu_x " << d << ", mu_y " << mu_y.size() << ", S " << S.rows()
        << "x" << S.cols() << ", W " << W.rows() << "x" << W.cols() << ")";
    throw ConfigError(msg.str());
  }
  if (!S.allFinite() || !W.allFinite() || !mu_x.allFinite() || !mu_y.allFinite()) {
    throw NumericalError("params: non-finite entries");
  }
  if (!(sigma2 >= kSigma2Floor)) throw NumericalError("params: sigma2 below floor");
}

ClvmParams ClvmParams::zeros(Index d, Index k, Index t, double sigma2) {
  return {Matrix::Zero(d, k), Matrix::Zero(d, t), Vector::Zero(d), Vector::Zero(d), sigma2};
}

}  // namespace clvm
