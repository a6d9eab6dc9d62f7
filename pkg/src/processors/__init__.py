# Processing modules for the TransNets pipeline
