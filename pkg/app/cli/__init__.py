# Command-line verbs
