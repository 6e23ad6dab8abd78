# Text formats, binary checkpoints and the SQLite run history
