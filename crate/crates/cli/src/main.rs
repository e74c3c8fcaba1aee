fn main() {
    std::process::exit(rebalance_cli::main_entry());
}
