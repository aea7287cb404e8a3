// Regenerates the seed-0 golden trajectory files:
//   make_golden <output directory>
#include <fstream>
#include <iostream>
#include <string>

#include "stepnft/environment.hpp"

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: make_golden <output directory>\n";
    return 2;
  }
  const std::string dir = argv[1];
  stepnft::BanditEnv bandit;
  stepnft::ReachEnv reach;
  std::ofstream b(dir + "/bandit_seed0.txt");
  stepnft::write_golden_trajectory(b, bandit, 0);
  std::ofstream r(dir + "/reach_seed0.txt");
  stepnft::write_golden_trajectory(r, reach, 0);
  return b && r ? 0 : 1;
}
