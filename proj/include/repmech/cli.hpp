#pragma once

#include <string>
#include <vector>

namespace repmech {

struct SelftestCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Invariant suite on a seeded toy model.
std::vector<SelftestCheck> run_selftest(unsigned long long seed);

// Exit codes: 0 ok, 1 usage, 2 data/parse, 3 numeric.
int cli_main(int argc, const char* const* argv);
int cli_main(const std::vector<std::string>& args);  // args exclude the program name

}  // namespace repmech
