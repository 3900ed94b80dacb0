#include <cstdio>

int main() {
  std::puts("wsl: cli under construction");
  return 0;
}
