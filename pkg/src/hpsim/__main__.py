from hpsim.cli import main

main()
