# Pipeline definitions built on the stage-graph engine
