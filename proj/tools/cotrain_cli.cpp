// SPDX-License-Identifier: Apache-2.0
#include <cstdio>

int main() {
  std::puts("cotrain: CLI not wired up yet");
  return 1;
}
