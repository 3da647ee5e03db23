fn main() {
    let args: Vec<String> = std::env::args().collect();
    if let Err(e) = banglagan_cli::run(&args) {
        if e.code == 0 {
            print!("{}", e.msg);
        } else {
            eprintln!("{}", e.msg.trim_end());
        }
        std::process::exit(e.code);
    }
}
