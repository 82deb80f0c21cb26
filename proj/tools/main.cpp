#include <iostream>

#include "nng/cli.hpp"

int main(int argc, char** argv)
{
    return nng::cli::main_entry(argc, argv, std::cout, std::cerr);
}
