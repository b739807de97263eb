#include <cstdio>

int main() {
    // placeholder until the subcommand surface lands
    std::fprintf(stderr, "garmentgen: not wired up yet\n");
    return 1;
}
