fn main() {
    println!("oes-gnn");
}
