# two channels, equal length
@problemName Steps
@timeStamps false
@missing false
@univariate false
@dimensions 2
@equalLength true
@seriesLength 4
@classLabel true low high
@data
0.1,0.2,0.3,0.4:1,1,1,1:low
2.5,2.5,2.0,1.5:-1,0,1,2:high
0,0,0,0:3e-1,4E2,-5,6:low
