#include "ssng/runner.hpp"

int main(int argc, char** argv) { return ssng::runner::run(argc, argv); }
