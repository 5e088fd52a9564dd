#include <cstdio>

int main() {
  std::puts("mdl: subcommands not wired yet");
  return 0;
}
