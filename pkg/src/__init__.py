# TransNets review-based rating prediction package
