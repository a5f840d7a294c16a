#include <cstdio>

#include "refanim/version.hpp"

int main() {
    std::printf("refanim %s\n", refanim::version());
    return 0;
}
