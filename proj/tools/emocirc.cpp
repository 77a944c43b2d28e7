// CLI entry point; subcommands are wired to pipeline stages.
#include <iostream>

int main() {
    std::cout << "emocirc: not yet wired\n";
    return 2;
}
