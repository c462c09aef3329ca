#include "agrigen/cli.hpp"

int main(int argc, char** argv) {
    return agrigen::cli::dispatch(argc, argv);
}
