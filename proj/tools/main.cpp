#include "cli.hpp"

#include "dafdft/runtime.hpp"

#include <iostream>

int main(int argc, char** argv)
{
    dafdft::tune_allocator();
    return dafdft::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
