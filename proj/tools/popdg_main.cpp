#include <cstdio>

int main() {
  std::puts("popdg: command-line interface not wired up yet");
  return 1;
}
