"""Multi-object tracking as min-cost network flow with sparse pairwise costs."""
