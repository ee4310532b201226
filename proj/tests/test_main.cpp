#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "dafdft/runtime.hpp"

int main(int argc, char** argv)
{
    dafdft::tune_allocator();
    doctest::Context context(argc, argv);
    return context.run();
}
