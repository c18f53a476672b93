#include "ctxvit/cli.hpp"

int main(int argc, char** argv) {
  ctxvit::configure_allocator();
  return ctxvit::run_cli(argc, argv);
}
