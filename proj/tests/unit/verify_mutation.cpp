// Built with a flipped sign in B_t. Succeeds (exit 0) only if the verify
// suite notices: the affine and gradient-form checks must fail.
#include <iostream>
#include <set>

#include "stepnft/verify.hpp"

int main() {
  using namespace stepnft;
  VerifyOptions o;
  o.trials = 1000;
  o.samples = 20000;
  o.chains = 20000;
  const auto reports = run_verify_suite(o);
  write_report_summary(std::cout, reports);
  std::set<std::string> failed;
  for (const auto& r : reports) {
    if (r.status == CheckStatus::Fail) failed.insert(r.name);
  }
  const bool caught = failed.count("affine_coefficients") && failed.count("gradient_form_cosine");
  std::cout << (caught ? "mutation detected" : "MUTATION NOT DETECTED") << '\n';
  return caught ? 0 : 1;
}
